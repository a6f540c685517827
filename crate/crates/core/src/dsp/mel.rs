//! Log-mel spectrogram used by the training loss.
//!
//! Centered STFT (reflect padding of `n_fft/2`), periodic Hann window,
//! magnitude spectrum, HTK-scale triangular filters without area
//! normalisation, then `ln(max(mel, floor))`.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use vnsc_tensor::{Real, Tensor, Var};

use crate::error::{config_err, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 48_000,
            n_fft: 1024,
            hop: 240,
            n_mels: 80,
            f_min: 0.0,
            f_max: 24_000.0,
            log_floor: 1e-5,
        }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

struct Inner {
    cfg: MelConfig,
    window: Vec<f64>,
    /// `[n_mels][n_bins]`
    filters: Vec<f64>,
    /// Nonzero bin range of each filter.
    support: Vec<(usize, usize)>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

#[derive(Clone)]
pub struct MelSpectrogram {
    inner: Arc<Inner>,
}

struct Analysis {
    frames: usize,
    /// `[frames][n_bins]`
    stft: Vec<Complex<f64>>,
    /// `[n_mels][frames]`, before the log.
    mel: Vec<f64>,
}

impl MelSpectrogram {
    pub fn new(cfg: MelConfig) -> Result<Self> {
        if cfg.n_fft < 2 || cfg.hop == 0 || cfg.n_mels == 0 || cfg.log_floor <= 0.0 {
            return Err(config_err(format!("invalid mel configuration {cfg:?}")));
        }
        if !(cfg.f_min >= 0.0 && cfg.f_max > cfg.f_min && cfg.f_max <= cfg.sample_rate as f64 / 2.0) {
            return Err(config_err(format!(
                "mel band {}..{} Hz outside 0..{} Hz",
                cfg.f_min,
                cfg.f_max,
                cfg.sample_rate / 2
            )));
        }
        let n = cfg.n_fft;
        let window = (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect();
        let filters = mel_filterbank(&cfg);
        let bins = n / 2 + 1;
        let support = filters
            .chunks(bins)
            .map(|f| {
                let lo = f.iter().position(|&w| w != 0.0).unwrap_or(0);
                let hi = f.iter().rposition(|&w| w != 0.0).map_or(lo, |i| i + 1);
                (lo, hi)
            })
            .collect();
        let mut planner = FftPlanner::new();
        Ok(Self {
            inner: Arc::new(Inner {
                cfg,
                window,
                filters,
                support,
                forward: planner.plan_fft_forward(n),
                inverse: planner.plan_fft_inverse(n),
            }),
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.inner.cfg
    }

    pub fn n_bins(&self) -> usize {
        self.inner.cfg.n_fft / 2 + 1
    }

    /// Triangular filter weights, `[n_mels, n_fft/2 + 1]`.
    pub fn filters(&self) -> Tensor<f64> {
        Tensor::new(&[self.inner.cfg.n_mels, self.n_bins()], self.inner.filters.clone()).expect("filter shape")
    }

    /// Center frequency of each band in Hz.
    pub fn band_centers(&self) -> Vec<f64> {
        let cfg = &self.inner.cfg;
        let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
        (1..=cfg.n_mels)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect()
    }

    pub fn frames_for(&self, len: usize) -> usize {
        1 + len / self.inner.cfg.hop
    }

    fn pad(&self) -> usize {
        self.inner.cfg.n_fft / 2
    }

    fn analyze(&self, x: &[f64]) -> Result<Analysis> {
        let inner = &self.inner;
        let (n_fft, hop, pad) = (inner.cfg.n_fft, inner.cfg.hop, self.pad());
        let len = x.len();
        if len <= pad {
            return Err(config_err(format!(
                "signal of {len} samples too short for centered STFT with n_fft {n_fft}"
            )));
        }
        let padded: Vec<f64> = (0..len + 2 * pad).map(|p| x[reflect_index(p, pad, len)]).collect();
        let frames = self.frames_for(len);
        let bins = self.n_bins();
        let mut stft = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        for t in 0..frames {
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(inner.window[i] * padded[t * hop + i], 0.0);
            }
            inner.forward.process(&mut buf);
            stft.extend_from_slice(&buf[..bins]);
        }
        let n_mels = inner.cfg.n_mels;
        let mut mel = vec![0.0; n_mels * frames];
        let mut mag = vec![0.0; bins];
        for t in 0..frames {
            for (a, c) in mag.iter_mut().zip(&stft[t * bins..(t + 1) * bins]) {
                *a = c.norm();
            }
            for (m, &(lo, hi)) in inner.support.iter().enumerate() {
                let f = &inner.filters[m * bins + lo..m * bins + hi];
                mel[m * frames + t] = f.iter().zip(&mag[lo..hi]).map(|(w, a)| w * a).sum();
            }
        }
        Ok(Analysis { frames, stft, mel })
    }

    /// `[n_mels, frames]` log-mel spectrogram.
    pub fn compute(&self, samples: &[f32]) -> Result<Tensor<f32>> {
        let x: Vec<f64> = samples.iter().map(|&v| v as f64).collect();
        let a = self.analyze(&x)?;
        let floor = self.inner.cfg.log_floor;
        let data = a.mel.iter().map(|&v| v.max(floor).ln() as f32).collect();
        Ok(Tensor::new(&[self.inner.cfg.n_mels, a.frames], data)?)
    }

    /// Differentiable log-mel spectrogram of a 1-D waveform.
    pub fn compute_var<'g, E: Real>(&self, wave: &Var<'g, E>) -> Result<Var<'g, E>> {
        if wave.value().rank() != 1 {
            return Err(config_err(format!("waveform must be 1-D, got {:?}", wave.shape())));
        }
        let x: Vec<f64> = wave.value().data().iter().map(|v| v.to_f64()).collect();
        let len = x.len();
        let a = self.analyze(&x)?;
        let floor = self.inner.cfg.log_floor;
        let n_mels = self.inner.cfg.n_mels;
        let out = Tensor::new(
            &[n_mels, a.frames],
            a.mel.iter().map(|&v| E::from_f64(v.max(floor).ln())).collect(),
        )?;
        let this = self.clone();
        Ok(wave.graph().record(out, &[wave], move |g, _| {
            let grad = this.backward(&a, g, len);
            vec![Some(Tensor::new(&[len], grad.into_iter().map(E::from_f64).collect()).expect("length"))]
        }))
    }

    fn backward<E: Real>(&self, a: &Analysis, g: &Tensor<E>, len: usize) -> Vec<f64> {
        let inner = &self.inner;
        let (n_fft, hop, pad) = (inner.cfg.n_fft, inner.cfg.hop, self.pad());
        let (bins, n_mels, frames) = (self.n_bins(), inner.cfg.n_mels, a.frames);
        let floor = inner.cfg.log_floor;
        let mut grad_padded = vec![0.0; len + 2 * pad];
        let mut gmel = vec![0.0; n_mels];
        let mut gmag = vec![0.0; bins];
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        for t in 0..frames {
            for m in 0..n_mels {
                let v = a.mel[m * frames + t];
                gmel[m] = if v > floor { g.data()[m * frames + t].to_f64() / v } else { 0.0 };
            }
            gmag.iter_mut().for_each(|v| *v = 0.0);
            for (m, &(lo, hi)) in inner.support.iter().enumerate() {
                for k in lo..hi {
                    gmag[k] += inner.filters[m * bins + k] * gmel[m];
                }
            }
            buf.iter_mut().for_each(|b| *b = Complex::new(0.0, 0.0));
            for ((slot, &gk), &c) in buf.iter_mut().zip(&gmag).zip(&a.stft[t * bins..(t + 1) * bins]) {
                let mag = c.norm();
                if gk != 0.0 && mag > 0.0 {
                    *slot = c * (gk / mag);
                }
            }
            inner.inverse.process(&mut buf);
            for i in 0..n_fft {
                grad_padded[t * hop + i] += inner.window[i] * buf[i].re;
            }
        }
        let mut grad = vec![0.0; len];
        for (p, gp) in grad_padded.into_iter().enumerate() {
            grad[reflect_index(p, pad, len)] += gp;
        }
        grad
    }
}

/// Source index of padded position `p` under reflect padding by `pad`.
fn reflect_index(p: usize, pad: usize, len: usize) -> usize {
    if p < pad {
        pad - p
    } else if p < pad + len {
        p - pad
    } else {
        len - 2 - (p - pad - len)
    }
}

fn mel_filterbank(cfg: &MelConfig) -> Vec<f64> {
    let bins = cfg.n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
    let mut filters = vec![0.0; cfg.n_mels * bins];
    for m in 0..cfg.n_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..bins {
            let f = k as f64 * bin_hz;
            let rise = (f - left) / (center - left);
            let fall = (right - f) / (right - center);
            filters[m * bins + k] = rise.min(fall).max(0.0);
        }
    }
    filters
}

/// Log-mel spectrogram with the default configuration.
pub fn mel_spectrogram(samples: &[f32]) -> Result<Tensor<f32>> {
    MelSpectrogram::new(MelConfig::default())?.compute(samples)
}
