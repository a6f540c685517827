//! Residual vector quantization.
//!
//! Stage `q` picks the codeword nearest (squared L2, accumulated in `f64`,
//! ties to the lowest index) to the running residual. Row 0 of every stage
//! after the first is pinned to the zero vector, so a stage can always leave
//! the residual unchanged and residual energy never grows.
//!
//! Codebooks learn by exponential moving averages of assigned residuals;
//! gradients reach the encoder through a straight-through estimator.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vnsc_tensor::{ParamStore, Real, Tensor, Var};

use crate::config::RvqConfig;
use crate::error::{config_err, Result};

pub const EMA_EPS: f64 = 1e-5;

/// `[Q][T]` codeword indices.
pub type CodeIndices = Vec<Vec<u32>>;

#[derive(Clone, Debug, PartialEq)]
pub struct RvqCodebooks {
    /// Per stage, `[K, D]`.
    pub codewords: Vec<Tensor<f32>>,
    /// Per stage, `[K]`.
    pub ema_counts: Vec<Tensor<f32>>,
    /// Per stage, `[K, D]`.
    pub ema_sums: Vec<Tensor<f32>>,
}

fn stage_name(q: usize, field: &str) -> String {
    format!("rvq.stage{}.{field}", q + 1)
}

pub const RVQ_INITIALIZED: &str = "rvq.initialized";

impl RvqCodebooks {
    /// Wraps codeword tables, pinning row 0 of stages after the first to
    /// zero. EMA statistics start at one count per codeword.
    pub fn new(mut codewords: Vec<Tensor<f32>>) -> Result<Self> {
        let first = codewords.first().ok_or_else(|| config_err("RVQ needs at least one stage"))?;
        let (k, d) = (first.dim(0), first.dim(1));
        if k == 0 || d == 0 {
            return Err(config_err("empty codebook"));
        }
        for (q, c) in codewords.iter_mut().enumerate() {
            if c.shape() != [k, d] {
                return Err(config_err(format!("stage {} codebook has shape {:?}, expected [{k}, {d}]", q + 1, c.shape())));
            }
            if q > 0 {
                c.data_mut()[..d].fill(0.0);
            }
        }
        let ema_counts = codewords.iter().map(|_| Tensor::ones(&[k])).collect();
        let ema_sums = codewords.clone();
        Ok(Self {
            codewords,
            ema_counts,
            ema_sums,
        })
    }

    pub fn random(cfg: &RvqConfig, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let bound = (1.0 / dim as f64).sqrt() as f32;
        let books = (0..cfg.stages)
            .map(|_| Tensor::from_fn(&[cfg.entries, dim], |_| rng.random_range(-bound..=bound)))
            .collect();
        Self::new(books)
    }

    pub fn stages(&self) -> usize {
        self.codewords.len()
    }

    pub fn entries(&self) -> usize {
        self.codewords[0].dim(0)
    }

    pub fn dim(&self) -> usize {
        self.codewords[0].dim(1)
    }

    pub(crate) fn insert_into(&self, store: &mut ParamStore) -> Result<()> {
        for q in 0..self.stages() {
            store.insert(stage_name(q, "codewords"), self.codewords[q].clone(), false)?;
            store.insert(stage_name(q, "ema_counts"), self.ema_counts[q].clone(), false)?;
            store.insert(stage_name(q, "ema_sums"), self.ema_sums[q].clone(), false)?;
        }
        store.insert(RVQ_INITIALIZED, Tensor::zeros(&[1]), false)?;
        Ok(())
    }

    pub fn from_store(store: &ParamStore, stages: usize) -> Result<Self> {
        let get = |q, f| store.tensor(&stage_name(q, f)).cloned();
        let mut books = Self {
            codewords: Vec::with_capacity(stages),
            ema_counts: Vec::with_capacity(stages),
            ema_sums: Vec::with_capacity(stages),
        };
        for q in 0..stages {
            books.codewords.push(get(q, "codewords")?);
            books.ema_counts.push(get(q, "ema_counts")?);
            books.ema_sums.push(get(q, "ema_sums")?);
        }
        Ok(books)
    }

    pub fn write_to(&self, store: &mut ParamStore) -> Result<()> {
        for q in 0..self.stages() {
            store.set(&stage_name(q, "codewords"), self.codewords[q].clone())?;
            store.set(&stage_name(q, "ema_counts"), self.ema_counts[q].clone())?;
            store.set(&stage_name(q, "ema_sums"), self.ema_sums[q].clone())?;
        }
        Ok(())
    }

    fn nearest(&self, q: usize, residual: &[f32]) -> u32 {
        nearest_in(self.codewords[q].data(), self.dim(), residual)
    }
}

fn nearest_in(book: &[f32], d: usize, residual: &[f32]) -> u32 {
    let mut best = (f64::INFINITY, 0u32);
    for (k, row) in book.chunks_exact(d).enumerate() {
        let dist: f64 = row
            .iter()
            .zip(residual)
            .map(|(&c, &r)| {
                let diff = r as f64 - c as f64;
                diff * diff
            })
            .sum();
        if dist < best.0 {
            best = (dist, k as u32);
        }
    }
    best.1
}

#[derive(Clone, Debug, PartialEq)]
pub struct Quantized {
    pub indices: CodeIndices,
    /// `[D, T]`
    pub quantized: Tensor<f32>,
    /// Total squared residual after each stage.
    pub residual_energies: Vec<f64>,
}

fn columns(x: &Tensor<f32>) -> Vec<Vec<f32>> {
    (0..x.dim(1)).map(|t| x.column(t)).collect()
}

fn from_columns(cols: &[Vec<f32>], d: usize) -> Tensor<f32> {
    let t = cols.len();
    Tensor::from_fn(&[d, t], |i| cols[i % t][i / t])
}

/// Greedy residual quantization of `latent [D, T]`.
pub fn rvq_quantize(latent: &Tensor<f32>, books: &RvqCodebooks) -> Result<Quantized> {
    let d = books.dim();
    if latent.rank() != 2 || latent.dim(0) != d {
        return Err(config_err(format!("latent shape {:?} does not match codebook dimension {d}", latent.shape())));
    }
    let mut residual = columns(latent);
    let mut acc = vec![vec![0.0f32; d]; residual.len()];
    let mut indices = Vec::with_capacity(books.stages());
    let mut energies = Vec::with_capacity(books.stages());
    for q in 0..books.stages() {
        let mut stage = Vec::with_capacity(residual.len());
        let mut energy = 0.0;
        for (r, a) in residual.iter_mut().zip(&mut acc) {
            let k = books.nearest(q, r);
            let code = &books.codewords[q].data()[k as usize * d..(k as usize + 1) * d];
            for ((rv, av), &c) in r.iter_mut().zip(a.iter_mut()).zip(code) {
                *rv -= c;
                *av += c;
            }
            energy += r.iter().map(|&v| v as f64 * v as f64).sum::<f64>();
            stage.push(k);
        }
        indices.push(stage);
        energies.push(energy);
    }
    Ok(Quantized {
        indices,
        quantized: from_columns(&acc, d),
        residual_energies: energies,
    })
}

/// Sum of the indexed codewords, accumulated in stage order.
pub fn rvq_dequantize(indices: &CodeIndices, books: &RvqCodebooks) -> Result<Tensor<f32>> {
    if indices.len() != books.stages() {
        return Err(config_err(format!(
            "{} index stages for {} codebooks",
            indices.len(),
            books.stages()
        )));
    }
    let (d, k) = (books.dim(), books.entries());
    let t = indices[0].len();
    let mut acc = vec![vec![0.0f32; d]; t];
    for (q, stage) in indices.iter().enumerate() {
        if stage.len() != t {
            return Err(config_err("index stages differ in length"));
        }
        for (a, &idx) in acc.iter_mut().zip(stage) {
            if idx as usize >= k {
                return Err(config_err(format!("index {idx} out of range for {k} codewords")));
            }
            let code = &books.codewords[q].data()[idx as usize * d..(idx as usize + 1) * d];
            for (av, &c) in a.iter_mut().zip(code) {
                *av += c;
            }
        }
    }
    Ok(from_columns(&acc, d))
}

/// Commitment loss `mean((latent - quantized)²)` with the quantized target
/// held constant.
pub fn quantization_loss<'g, E: Real>(latent: &Var<'g, E>, quantized: &Tensor<f32>) -> Result<Var<'g, E>> {
    let target = latent.graph().constant(quantized.cast::<E>());
    Ok(latent.mse(&target)?)
}

/// `latent + stop_gradient(quantized - latent)`: forward value is the
/// quantized latent, gradient passes straight through.
pub fn straight_through<'g, E: Real>(latent: &Var<'g, E>, quantized: &Tensor<f32>) -> Result<Var<'g, E>> {
    let offset = quantized.cast::<E>().zip_map(latent.value(), |q, z| q - z)?;
    Ok(latent.add(&latent.graph().constant(offset))?)
}

/// Stage inputs (running residuals) for given indices, `[Q][T][D]`.
fn stage_inputs(latent: &Tensor<f32>, indices: &CodeIndices, books: &RvqCodebooks) -> Vec<Vec<Vec<f32>>> {
    let d = books.dim();
    let mut residual = columns(latent);
    let mut out = Vec::with_capacity(books.stages());
    for (q, stage) in indices.iter().enumerate() {
        out.push(residual.clone());
        for (r, &k) in residual.iter_mut().zip(stage) {
            let code = &books.codewords[q].data()[k as usize * d..(k as usize + 1) * d];
            for (rv, &c) in r.iter_mut().zip(code) {
                *rv -= c;
            }
        }
    }
    out
}

/// EMA codebook update from one batch of latents and their assignments.
///
/// `counts ← decay·counts + (1-decay)·n_k`, `sums ← decay·sums + (1-decay)·Σ r`,
/// `codeword = sums / max(counts, eps)`. Codewords whose count drops below
/// `dead_threshold` are re-seeded from a random stage input drawn with an
/// RNG seeded by `seed`.
pub fn codebook_update_ema(
    books: &mut RvqCodebooks,
    latents: &[(&Tensor<f32>, &CodeIndices)],
    decay: f64,
    dead_threshold: f64,
    seed: u64,
) {
    let (k, d) = (books.entries(), books.dim());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<_> = latents.iter().map(|(z, idx)| (stage_inputs(z, idx, books), *idx)).collect();
    for q in 0..books.stages() {
        let mut n = vec![0.0f64; k];
        let mut sums = vec![0.0f64; k * d];
        let mut pool: Vec<&[f32]> = Vec::new();
        for (stage_in, idx) in &inputs {
            for (r, &code) in stage_in[q].iter().zip(&idx[q]) {
                n[code as usize] += 1.0;
                for (s, &v) in sums[code as usize * d..(code as usize + 1) * d].iter_mut().zip(r) {
                    *s += v as f64;
                }
                pool.push(r);
            }
        }
        let counts = books.ema_counts[q].data_mut();
        let ema_sums = books.ema_sums[q].data_mut();
        let words = books.codewords[q].data_mut();
        for j in 0..k {
            if q > 0 && j == 0 {
                continue;
            }
            let c = decay * counts[j] as f64 + (1.0 - decay) * n[j];
            counts[j] = c as f32;
            for i in 0..d {
                let s = decay * ema_sums[j * d + i] as f64 + (1.0 - decay) * sums[j * d + i];
                ema_sums[j * d + i] = s as f32;
                words[j * d + i] = (s / c.max(EMA_EPS)) as f32;
            }
            if c < dead_threshold {
                if let Some(v) = pool.choose(&mut rng) {
                    words[j * d..(j + 1) * d].copy_from_slice(v);
                    ema_sums[j * d..(j + 1) * d].copy_from_slice(v);
                    counts[j] = 1.0;
                }
            }
        }
    }
}

/// k-means++ seeding of every stage from one batch of latent columns.
///
/// Stage `q` is seeded from the residuals left by the already seeded stages.
pub fn kmeans_pp_init(latents: &[&Tensor<f32>], cfg: &RvqConfig, seed: u64) -> Result<RvqCodebooks> {
    let d = latents.first().ok_or_else(|| config_err("k-means++ needs data"))?.dim(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut residual: Vec<Vec<f32>> = latents.iter().flat_map(|z| columns(z)).collect();
    if residual.is_empty() {
        return Err(config_err("k-means++ needs at least one latent frame"));
    }
    let mut books = Vec::with_capacity(cfg.stages);
    for q in 0..cfg.stages {
        let mut centers: Vec<Vec<f32>> = Vec::with_capacity(cfg.entries);
        if q > 0 {
            centers.push(vec![0.0; d]);
        } else {
            centers.push(residual[rng.random_range(0..residual.len())].clone());
        }
        let dist = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>();
        let mut best: Vec<f64> = residual.iter().map(|r| dist(r, &centers[0])).collect();
        while centers.len() < cfg.entries {
            let total: f64 = best.iter().sum();
            let pick = if total > 0.0 {
                let mut u = rng.random::<f64>() * total;
                let mut chosen = best.len() - 1;
                for (i, &b) in best.iter().enumerate() {
                    if u < b {
                        chosen = i;
                        break;
                    }
                    u -= b;
                }
                chosen
            } else {
                rng.random_range(0..residual.len())
            };
            let c = residual[pick].clone();
            for (b, r) in best.iter_mut().zip(&residual) {
                *b = b.min(dist(r, &c));
            }
            centers.push(c);
        }
        let table = Tensor::from_fn(&[cfg.entries, d], |i| centers[i / d][i % d]);
        // Advance residuals through this stage before seeding the next one.
        for r in residual.iter_mut() {
            let k = nearest_in(table.data(), d, r) as usize;
            for (rv, &c) in r.iter_mut().zip(&table.data()[k * d..(k + 1) * d]) {
                *rv -= c;
            }
        }
        books.push(table);
    }
    let mut out = RvqCodebooks::new(books)?;
    for q in 0..out.stages() {
        out.ema_sums[q] = out.codewords[q].clone();
    }
    Ok(out)
}
