//! Training objectives, the optimizer and the desk-scale training loop.
//!
//! `L_codec = l_mdct + l_mel + l_quant` (unit weights by default); the VA
//! objective adds `λ_I·L_I`, the VUA objective adds `λ_I·L_I + λ_D·L_D`.

mod checkpoint;
mod optim;
mod toy;

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vnsc_tensor::{Graph, Real, Session, Tensor, Var};

pub use checkpoint::{configs_from_kv, load_checkpoint, load_model, save_checkpoint, CONFIG_FILE, OPTIMIZER_FILE, PARAMS_FILE};
pub use optim::{AdamWConfig, OptimizerState, OPTS_MAGIC, OPTS_VERSION};
pub use toy::{make_toy_dataset, make_toy_dataset_with, ToyConfig, Utterance};

use crate::codec::{decoder_forward, encoder_forward};
use crate::config::{KeyValues, ModelConfig, Scenario};
use crate::dsp::{MelConfig, MelSpectrogram, Mdct};
use crate::error::{config_err, Result, VnscError};
use crate::fusion::{Fusion, VISUAL_REGION};
use crate::model::Model;
use crate::rvq::{
    codebook_update_ema, kmeans_pp_init, quantization_loss, rvq_quantize, straight_through, CodeIndices, RvqCodebooks,
};
use crate::vision::{align_video, image_analyzer, image_reconstruction_loss, image_synthesizer};

/// Per-step loss terms; `total` is the weighted objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub l_mdct: f64,
    pub l_mel: f64,
    pub l_quant: f64,
    pub l_image: f64,
    pub l_distill: f64,
    pub total: f64,
}

impl LossReport {
    pub fn terms(&self) -> [(&'static str, f64); 6] {
        [
            ("l_mdct", self.l_mdct),
            ("l_mel", self.l_mel),
            ("l_quant", self.l_quant),
            ("l_image", self.l_image),
            ("l_distill", self.l_distill),
            ("total", self.total),
        ]
    }

    /// Element-wise mean of several reports.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let sum = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        LossReport {
            l_mdct: sum(|r| r.l_mdct),
            l_mel: sum(|r| r.l_mel),
            l_quant: sum(|r| r.l_quant),
            l_image: sum(|r| r.l_image),
            l_distill: sum(|r| r.l_distill),
            total: sum(|r| r.total),
        }
    }
}

impl fmt::Display for LossReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (k, v)) in self.terms().iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{k}={v:.6e}")?;
        }
        Ok(())
    }
}

/// Weights of every loss term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub mdct: f64,
    pub mel: f64,
    pub quant: f64,
    pub image: f64,
    pub distill: f64,
}

impl LossWeights {
    pub fn apply(&self, r: &LossReport) -> f64 {
        self.mdct * r.l_mdct
            + self.mel * r.l_mel
            + self.quant * r.l_quant
            + self.image * r.l_image
            + self.distill * r.l_distill
    }

    fn codec() -> Self {
        Self {
            mdct: 1.0,
            mel: 1.0,
            quant: 1.0,
            image: 0.0,
            distill: 0.0,
        }
    }
}

/// `L_codec + λ_I·L_I`
pub fn composite_loss_va(parts: &LossReport, lambda_image: f64) -> f64 {
    LossWeights {
        image: lambda_image,
        ..LossWeights::codec()
    }
    .apply(parts)
}

/// `L_codec + λ_I·L_I + λ_D·L_D`
pub fn composite_loss_vua(parts: &LossReport, lambda_image: f64, lambda_distill: f64) -> f64 {
    LossWeights {
        image: lambda_image,
        distill: lambda_distill,
        ..LossWeights::codec()
    }
    .apply(parts)
}

/// `(l_mdct, l_mel)`: MSE between MDCT planes and MAE between log-mel
/// spectrograms of the waveforms. Targets receive no gradient.
pub fn reconstruction_losses<'g, E: Real>(
    mel: &MelSpectrogram,
    target_spec: &Var<'g, E>,
    decoded_spec: &Var<'g, E>,
    target_wave: &Var<'g, E>,
    decoded_wave: &Var<'g, E>,
) -> Result<(Var<'g, E>, Var<'g, E>)> {
    let l_mdct = decoded_spec.mse(&target_spec.detach())?;
    let target_mel = mel.compute_var(&target_wave.detach())?;
    let l_mel = mel.compute_var(decoded_wave)?.mae(&target_mel)?;
    Ok((l_mdct, l_mel))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub optimizer: AdamWConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// MDCT frames per training crop.
    pub crop_frames: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Loss weights of the given scenario with the optimizer defaults.
    pub fn for_scenario(scenario: Scenario) -> Self {
        let (image, distill) = match scenario {
            Scenario::AudioOnly => (0.0, 0.0),
            Scenario::Va => (1e-5, 0.0),
            Scenario::Vua => (0.5e-5, 1.0),
        };
        Self {
            weights: LossWeights {
                image,
                distill,
                ..LossWeights::codec()
            },
            optimizer: AdamWConfig::default(),
            epochs: 1,
            batch_size: 4,
            crop_frames: 960,
            seed: 0,
        }
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        let (w, o) = (&self.weights, &self.optimizer);
        kv.set("weight_mdct", w.mdct);
        kv.set("weight_mel", w.mel);
        kv.set("weight_quant", w.quant);
        kv.set("lambda_image", w.image);
        kv.set("lambda_distill", w.distill);
        kv.set("lr", o.lr);
        kv.set("beta1", o.beta1);
        kv.set("beta2", o.beta2);
        kv.set("adam_eps", o.eps);
        kv.set("weight_decay", o.weight_decay);
        kv.set("lr_decay", o.epoch_decay);
        kv.set("epochs", self.epochs);
        kv.set("batch_size", self.batch_size);
        kv.set("crop_frames", self.crop_frames);
        kv.set("seed", self.seed);
        kv
    }

    pub fn apply_kv(&mut self, kv: &KeyValues) -> Result<()> {
        let (w, o) = (&mut self.weights, &mut self.optimizer);
        kv.update("weight_mdct", &mut w.mdct)?;
        kv.update("weight_mel", &mut w.mel)?;
        kv.update("weight_quant", &mut w.quant)?;
        kv.update("lambda_image", &mut w.image)?;
        kv.update("lambda_distill", &mut w.distill)?;
        kv.update("lr", &mut o.lr)?;
        kv.update("beta1", &mut o.beta1)?;
        kv.update("beta2", &mut o.beta2)?;
        kv.update("adam_eps", &mut o.eps)?;
        kv.update("weight_decay", &mut o.weight_decay)?;
        kv.update("lr_decay", &mut o.epoch_decay)?;
        kv.update("epochs", &mut self.epochs)?;
        kv.update("batch_size", &mut self.batch_size)?;
        kv.update("crop_frames", &mut self.crop_frames)?;
        kv.update("seed", &mut self.seed)?;
        if self.batch_size == 0 || self.crop_frames == 0 {
            return Err(config_err("batch_size and crop_frames must be positive"));
        }
        Ok(())
    }
}

/// One training crop: MDCT spectrum `[M, N]` and, for visual models, the
/// aligned lip sequence `[1, N, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub spec: Tensor<f32>,
    pub lips: Option<Tensor<f32>>,
}

impl Example {
    /// Crop of `n_frames` MDCT frames starting at frame `start`; audio past
    /// the end is zero, video past the end holds the last frame.
    pub fn from_utterance(cfg: &ModelConfig, utt: &Utterance, start: usize, n_frames: usize) -> Result<Self> {
        let m = cfg.codec.frame_shift;
        let mut crop: Vec<f32> = utt.samples.iter().skip(start * m).take(n_frames * m).copied().collect();
        crop.resize(n_frames * m, 0.0);
        let spec = Mdct::new(m)?.analyze(&crop)?;
        let lips = if cfg.scenario.uses_vision() {
            let clip = &utt.lips;
            let full = align_video(&clip.frames, clip.fps_num, clip.fps_den, start + n_frames)?;
            let plane = clip.frames.dim(1) * clip.frames.dim(2);
            let data = full.data()[start * plane..].to_vec();
            Some(Tensor::new(&[1, n_frames, clip.frames.dim(1), clip.frames.dim(2)], data)?)
        } else {
            None
        };
        Ok(Self { spec, lips })
    }

    /// Crop at a uniformly random start (0 when the utterance is short).
    pub fn random_crop(cfg: &ModelConfig, utt: &Utterance, n_frames: usize, rng: &mut impl Rng) -> Result<Self> {
        let available = utt.samples.len() / cfg.codec.frame_shift;
        let start = if available > n_frames {
            rng.random_range(0..=available - n_frames)
        } else {
            0
        };
        Self::from_utterance(cfg, utt, start, n_frames)
    }
}

/// Quantized latent used by [`batch_objective`].
pub enum Quantizer<'a> {
    /// Greedy RVQ with a straight-through estimator.
    Live(&'a RvqCodebooks),
    /// Fixed per-example quantized targets and straight-through offsets, one
    /// per example: the objective becomes a smooth function of every
    /// parameter, as needed for finite-difference checks.
    Frozen(&'a [FrozenQuantization]),
}

#[derive(Clone, Debug)]
pub struct FrozenQuantization {
    pub quantized: Tensor<f32>,
    /// `quantized − latent` at the point of freezing.
    pub offset: Tensor<f64>,
}

/// Differentiable batch objective and the data needed after backward.
pub struct BatchObjective<'g, E: Real> {
    pub total: Var<'g, E>,
    pub report: LossReport,
    /// Per example: latent `[D_code, T]` and its indices (live mode only).
    pub assignments: Vec<(Tensor<f32>, Option<CodeIndices>)>,
}

fn term<'g, E: Real>(vars: &[Var<'g, E>]) -> Result<Option<Var<'g, E>>> {
    let Some(first) = vars.first() else {
        return Ok(None);
    };
    let mut acc = first.clone();
    for v in &vars[1..] {
        acc = acc.add(v)?;
    }
    Ok(Some(acc.scale(1.0 / vars.len() as f64)))
}

/// Weighted objective averaged over `batch`. Parameters are read through
/// `s`, so bound variables take part in the gradient.
pub fn batch_objective<'g, E: Real>(
    s: &Session<'g, '_, E>,
    cfg: &ModelConfig,
    weights: &LossWeights,
    mel: &MelSpectrogram,
    batch: &[Example],
    quant: Quantizer<'_>,
) -> Result<BatchObjective<'g, E>> {
    if batch.is_empty() {
        return Err(config_err("empty training batch"));
    }
    if let Quantizer::Frozen(f) = &quant {
        if f.len() != batch.len() {
            return Err(config_err("one frozen quantization per example is required"));
        }
    }
    let g = s.graph();
    let mdct = Mdct::new(cfg.codec.frame_shift)?;
    let (mut mdct_l, mut mel_l, mut quant_l, mut image_l, mut distill_l) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut assignments = Vec::with_capacity(batch.len());

    for (i, ex) in batch.iter().enumerate() {
        let spec = g.constant(ex.spec.cast::<E>());
        let fusion = match (&ex.lips, cfg.scenario) {
            (Some(lips), Scenario::Va | Scenario::Vua) => {
                let _region = g.enter_region(VISUAL_REGION);
                let lips = g.constant(lips.cast::<E>());
                let v = image_analyzer(s, &cfg.vision, &lips)?;
                let recon = image_synthesizer(s, &cfg.vision, &v)?;
                image_l.push(image_reconstruction_loss(&lips, &recon)?);
                if cfg.scenario == Scenario::Va {
                    Fusion::Va(v)
                } else {
                    Fusion::VuaTraining(v)
                }
            }
            (None, Scenario::AudioOnly) => Fusion::AudioOnly,
            (None, _) => return Err(VnscError::Usage(format!("{} training needs lip sequences", cfg.scenario))),
            (Some(_), Scenario::AudioOnly) => {
                return Err(VnscError::Usage("audio-only training takes no lip sequences".into()))
            }
        };
        let enc = encoder_forward(s, cfg, &spec, fusion)?;
        distill_l.extend(enc.distill);
        let z = enc.latent;
        let z_value = z.value().cast::<f32>();
        let zq = match &quant {
            Quantizer::Live(books) => {
                let q = rvq_quantize(&z_value, books)?;
                quant_l.push(quantization_loss(&z, &q.quantized)?);
                let zq = straight_through(&z, &q.quantized)?;
                assignments.push((z_value, Some(q.indices)));
                zq
            }
            Quantizer::Frozen(frozen) => {
                let f = &frozen[i];
                quant_l.push(quantization_loss(&z, &f.quantized)?);
                assignments.push((z_value, None));
                z.add(&g.constant(f.offset.cast::<E>()))?
            }
        };
        let decoded = decoder_forward(s, cfg, &zq)?;
        let target_wave = mdct.synthesize_var(&spec)?;
        let decoded_wave = mdct.synthesize_var(&decoded)?;
        let (lm, lmel) = reconstruction_losses(mel, &spec, &decoded, &target_wave, &decoded_wave)?;
        mdct_l.push(lm);
        mel_l.push(lmel);
    }

    let parts = [
        (term(&mdct_l)?, weights.mdct),
        (term(&mel_l)?, weights.mel),
        (term(&quant_l)?, weights.quant),
        (term(&image_l)?, weights.image),
        (term(&distill_l)?, weights.distill),
    ];
    let value = |i: usize| parts[i].0.as_ref().map_or(0.0, |v| v.item().to_f64());
    let mut report = LossReport {
        l_mdct: value(0),
        l_mel: value(1),
        l_quant: value(2),
        l_image: value(3),
        l_distill: value(4),
        total: 0.0,
    };
    report.total = weights.apply(&report);
    let mut total: Option<Var<'g, E>> = None;
    for (v, w) in parts.iter() {
        if let Some(v) = v {
            let scaled = v.scale(*w);
            total = Some(match total {
                Some(t) => t.add(&scaled)?,
                None => scaled,
            });
        }
    }
    Ok(BatchObjective {
        total: total.expect("reconstruction terms are always present"),
        report,
        assignments,
    })
}

fn check_finite(report: &LossReport) -> Result<()> {
    for (term, value) in report.terms() {
        if !value.is_finite() {
            return Err(VnscError::NonFinite { term, value });
        }
    }
    Ok(())
}

fn step_seed(seed: u64, step: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ step.wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Seeds every codebook by k-means++ over the batch latents.
fn initialize_codebooks(model: &mut Model, batch: &[Example], seed: u64) -> Result<()> {
    let g = Graph::<f32>::inference();
    let s = Session::new(&g, &model.params, true);
    let mut latents = Vec::with_capacity(batch.len());
    for ex in batch {
        let spec = g.constant(ex.spec.clone());
        let fusion = match &ex.lips {
            Some(lips) if model.cfg.scenario == Scenario::Va => {
                let _region = g.enter_region(VISUAL_REGION);
                Fusion::Va(image_analyzer(&s, &model.cfg.vision, &g.constant(lips.clone()))?)
            }
            _ if model.cfg.scenario == Scenario::Va => {
                return Err(VnscError::Usage("VA training needs lip sequences".into()))
            }
            _ if model.cfg.scenario == Scenario::Vua => Fusion::VuaInference,
            _ => Fusion::AudioOnly,
        };
        latents.push(encoder_forward(&s, &model.cfg, &spec, fusion)?.latent.value().clone());
    }
    drop(s);
    let refs: Vec<&Tensor<f32>> = latents.iter().collect();
    let books = kmeans_pp_init(&refs, &model.cfg.rvq, seed)?;
    model.set_codebooks(&books)?;
    model.mark_rvq_initialized()
}

/// One optimizer step on `batch`, followed by buffer and codebook updates.
///
/// Codebooks are seeded from the first batch a model sees. Deterministic
/// given the model, optimizer state, configuration and batch.
pub fn train_step(model: &mut Model, opt: &mut OptimizerState, cfg: &TrainConfig, batch: &[Example]) -> Result<LossReport> {
    let seed = step_seed(cfg.seed, opt.step);
    if !model.rvq_initialized() {
        initialize_codebooks(model, batch, seed)?;
    }
    let mel = MelSpectrogram::new(MelConfig::default())?;
    let mut books = model.codebooks()?;
    let (report, grads, updates, assignments) = {
        let g = Graph::<f32>::new();
        let s = Session::new(&g, &model.params, true);
        let obj = batch_objective(&s, &model.cfg, &cfg.weights, &mel, batch, Quantizer::Live(&books))?;
        check_finite(&obj.report)?;
        let grads = g.backward(&obj.total);
        let grads: Vec<(String, Tensor<f64>)> =
            s.param_grads(&grads).into_iter().map(|(n, t)| (n, t.cast::<f64>())).collect();
        if let Some(value) = grads
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .find(|v| !v.is_finite())
        {
            return Err(VnscError::NonFinite { term: "gradient", value });
        }
        (obj.report, grads, s.take_updates(), obj.assignments)
    };
    opt.apply(&mut model.params, &grads)?;
    for (name, value) in updates {
        model.params.set(&name, value)?;
    }
    let pairs: Vec<(&Tensor<f32>, &CodeIndices)> = assignments
        .iter()
        .filter_map(|(z, idx)| idx.as_ref().map(|i| (z, i)))
        .collect();
    codebook_update_ema(&mut books, &pairs, model.cfg.rvq.decay, model.cfg.rvq.dead_threshold, seed);
    model.set_codebooks(&books)?;
    Ok(report)
}

/// One pass over `data` in a seeded random order, cropping each utterance
/// at a random offset. Returns the step reports and advances the epoch.
pub fn train_epoch(
    model: &mut Model,
    opt: &mut OptimizerState,
    cfg: &TrainConfig,
    data: &[Utterance],
    mut on_step: impl FnMut(u64, &LossReport),
) -> Result<Vec<LossReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(step_seed(cfg.seed, u64::MAX - opt.epoch));
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let mut reports = Vec::new();
    for chunk in order.chunks(cfg.batch_size) {
        let batch = chunk
            .iter()
            .map(|&i| Example::random_crop(&model.cfg, &data[i], cfg.crop_frames, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let report = train_step(model, opt, cfg, &batch)?;
        on_step(opt.step, &report);
        reports.push(report);
    }
    opt.end_epoch();
    Ok(reports)
}

/// Mean reconstruction loss terms of `model` on `batch` without updating
/// anything (BN in inference mode).
pub fn evaluate(model: &Model, cfg: &TrainConfig, batch: &[Example]) -> Result<LossReport> {
    let mel = MelSpectrogram::new(MelConfig::default())?;
    let books = model.codebooks()?;
    let g = Graph::<f32>::inference();
    let s = Session::new(&g, &model.params, false);
    let obj = batch_objective(&s, &model.cfg, &cfg.weights, &mel, batch, Quantizer::Live(&books))?;
    Ok(obj.report)
}

/// Freezes each example's quantization at the current parameters for use
/// with [`Quantizer::Frozen`], evaluating the forward pass in `f64`.
pub fn freeze_quantization(model: &Model, batch: &[Example]) -> Result<Vec<FrozenQuantization>> {
    let books = model.codebooks()?;
    let mut out = Vec::with_capacity(batch.len());
    for ex in batch {
        let g = Graph::<f64>::inference();
        let s = Session::new(&g, &model.params, true);
        let spec = g.constant(ex.spec.cast::<f64>());
        let fusion = match &ex.lips {
            Some(lips) if model.cfg.scenario.uses_vision() => {
                let v = image_analyzer(&s, &model.cfg.vision, &g.constant(lips.cast::<f64>()))?;
                if model.cfg.scenario == Scenario::Va {
                    Fusion::Va(v)
                } else {
                    Fusion::VuaTraining(v)
                }
            }
            _ => Fusion::AudioOnly,
        };
        let z = encoder_forward(&s, &model.cfg, &spec, fusion)?.latent.value().clone();
        let q = rvq_quantize(&z.cast::<f32>(), &books)?;
        let offset = q.quantized.cast::<f64>().zip_map(&z, |a, b| a - b)?;
        out.push(FrozenQuantization {
            quantized: q.quantized,
            offset,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composite_arithmetic() {
        let r = LossReport {
            l_mdct: 1.0,
            l_mel: 0.5,
            l_quant: 0.1,
            l_image: 2.0,
            l_distill: 0.7,
            total: 0.0,
        };
        assert!((composite_loss_va(&r, 1e-5) - (1.6 + 2e-5)).abs() < 1e-12);
        assert!((composite_loss_va(&r, 0.0) - 1.6).abs() < 1e-12);
        assert_eq!(composite_loss_vua(&r, 1e-5, 0.0), composite_loss_va(&r, 1e-5));
        assert!((composite_loss_vua(&r, 0.5e-5, 1.0) - (1.6 + 1e-5 + 0.7)).abs() < 1e-12);
        assert_eq!(composite_loss_vua(&LossReport::default(), 0.5e-5, 1.0), 0.0);
    }

    #[test]
    fn report_line_is_key_value() {
        let line = LossReport::default().to_string();
        let keys: Vec<&str> = line.split(' ').map(|kv| kv.split('=').next().unwrap()).collect();
        assert_eq!(keys, ["l_mdct", "l_mel", "l_quant", "l_image", "l_distill", "total"]);
    }

    #[test]
    fn train_config_round_trips_through_text() {
        let mut cfg = TrainConfig::for_scenario(Scenario::Vua);
        cfg.seed = 17;
        cfg.optimizer.lr = 1e-3;
        let kv = KeyValues::parse(&cfg.to_kv().to_string()).unwrap();
        let mut back = TrainConfig::for_scenario(Scenario::AudioOnly);
        back.apply_kv(&kv).unwrap();
        assert_eq!(back, cfg);
    }
}
