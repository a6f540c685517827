//! Orthonormal MDCT with a sine window.
//!
//! Frame `t` covers padded samples `[t·M, t·M + 2M)` and
//!
//! `X[k,t] = sqrt(2/M) Σ_n w[n]·x[t·M + n]·cos(π/M·(n + 1/2 + M/2)·(k + 1/2))`
//!
//! with `w[n] = sin(π(n + 1/2)/(2M))`. Under this scaling the synthesis
//! operator is the exact transpose of the analysis operator.
//!
//! A signal of `L` samples yields `N = ceil(L/M)` frames. It is reflect-padded
//! by `M/2` on the left and up to `(N+1)·M` samples on the right; synthesis
//! returns `N·M` samples aligned with the original, exact on `[M/2, L − M/2)`.

use std::f64::consts::PI;
use std::sync::Arc;

use vnsc_tensor::{Real, Tensor, Var};

use crate::error::{config_err, Result};

#[derive(Clone, Debug)]
pub struct Mdct {
    m: usize,
    /// `[M][2M]` basis including window and scale.
    basis: Arc<Vec<f64>>,
}

impl Mdct {
    pub fn new(frame_shift: usize) -> Result<Self> {
        if frame_shift == 0 || frame_shift % 2 != 0 {
            return Err(config_err(format!("frame shift must be a positive even number, got {frame_shift}")));
        }
        let m = frame_shift;
        let scale = (2.0 / m as f64).sqrt();
        let mut basis = Vec::with_capacity(m * 2 * m);
        for k in 0..m {
            for n in 0..2 * m {
                let w = (PI * (n as f64 + 0.5) / (2 * m) as f64).sin();
                let phase = PI / m as f64 * (n as f64 + 0.5 + m as f64 / 2.0) * (k as f64 + 0.5);
                basis.push(scale * w * phase.cos());
            }
        }
        Ok(Self { m, basis: Arc::new(basis) })
    }

    pub fn frame_shift(&self) -> usize {
        self.m
    }

    /// Frame count for a signal of `len` samples.
    pub fn frames_for(&self, len: usize) -> usize {
        len.div_ceil(self.m)
    }

    /// `[M, N]` spectrum of `samples`.
    pub fn analyze(&self, samples: &[f32]) -> Result<Tensor<f32>> {
        let m = self.m;
        let len = samples.len();
        if len < 2 * m {
            return Err(config_err(format!("signal of {len} samples is shorter than two frame shifts ({})", 2 * m)));
        }
        let n = self.frames_for(len);
        let half = m / 2;
        let total = (n + 1) * m;
        let right = total - half - len;
        let mut padded = Vec::with_capacity(total);
        padded.extend((0..half).map(|i| samples[half - i] as f64));
        padded.extend(samples.iter().map(|&s| s as f64));
        padded.extend((0..right).map(|j| samples[len - 2 - j] as f64));
        let spec = self.analyze_padded(&padded, n);
        Ok(Tensor::new(&[m, n], spec.into_iter().map(|v| v as f32).collect())?)
    }

    /// Analysis of an already padded buffer of `(n+1)·M` samples, `[M, n]`.
    fn analyze_padded(&self, padded: &[f64], n: usize) -> Vec<f64> {
        let m = self.m;
        let mut out = vec![0.0; m * n];
        for t in 0..n {
            let frame = &padded[t * m..t * m + 2 * m];
            for k in 0..m {
                let row = &self.basis[k * 2 * m..(k + 1) * 2 * m];
                out[k * n + t] = row.iter().zip(frame).map(|(b, x)| b * x).sum();
            }
        }
        out
    }

    /// Overlap-add synthesis of `[M, N]` into `N·M` samples.
    pub fn synthesize<E: Real>(&self, spec: &Tensor<E>) -> Result<Vec<E>> {
        let (m, n) = self.check_spec(spec)?;
        let coeffs: Vec<f64> = spec.data().iter().map(|v| v.to_f64()).collect();
        let full = self.overlap_add(&coeffs, n);
        Ok(full[m / 2..m / 2 + n * m].iter().map(|&v| E::from_f64(v)).collect())
    }

    fn overlap_add(&self, coeffs: &[f64], n: usize) -> Vec<f64> {
        let m = self.m;
        let mut full = vec![0.0; (n + 1) * m];
        let mut column = vec![0.0; m];
        for t in 0..n {
            for (k, c) in column.iter_mut().enumerate() {
                *c = coeffs[k * n + t];
            }
            let out = &mut full[t * m..t * m + 2 * m];
            for (k, &c) in column.iter().enumerate() {
                if c == 0.0 {
                    continue;
                }
                let row = &self.basis[k * 2 * m..(k + 1) * 2 * m];
                for (o, b) in out.iter_mut().zip(row) {
                    *o += c * b;
                }
            }
        }
        full
    }

    fn check_spec<E: Real>(&self, spec: &Tensor<E>) -> Result<(usize, usize)> {
        if spec.rank() != 2 || spec.dim(0) != self.m {
            return Err(config_err(format!(
                "spectrum shape {:?} does not have {} bins",
                spec.shape(),
                self.m
            )));
        }
        Ok((self.m, spec.dim(1)))
    }

    /// Differentiable synthesis: `[M, N]` to a waveform of `N·M` samples.
    pub fn synthesize_var<'g, E: Real>(&self, spec: &Var<'g, E>) -> Result<Var<'g, E>> {
        let (m, n) = self.check_spec(spec.value())?;
        let wave = self.synthesize(spec.value())?;
        let out = Tensor::new(&[n * m], wave)?;
        let this = self.clone();
        Ok(spec.graph().record(out, &[spec], move |g, _| {
            let mut padded = vec![0.0; (n + 1) * m];
            for (p, v) in padded[m / 2..m / 2 + n * m].iter_mut().zip(g.data()) {
                *p = v.to_f64();
            }
            let spec_grad = this.analyze_padded(&padded, n);
            let data = spec_grad.into_iter().map(E::from_f64).collect();
            vec![Some(Tensor::new(&[m, n], data).expect("shape matches"))]
        }))
    }
}

/// Spectrum `[frame_shift, ceil(len/frame_shift)]` of `samples`.
pub fn mdct(samples: &[f32], frame_shift: usize) -> Result<Tensor<f32>> {
    Mdct::new(frame_shift)?.analyze(samples)
}

/// Waveform of `N·frame_shift` samples from a `[frame_shift, N]` spectrum.
pub fn imdct(spec: &Tensor<f32>) -> Result<Vec<f32>> {
    Mdct::new(spec.dim(0))?.synthesize(spec)
}
