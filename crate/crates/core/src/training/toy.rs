//! Seeded synthetic audio-visual corpus.
//!
//! Each utterance is a harmonic tone plus low-passed noise under a slowly
//! varying amplitude envelope. Its lip clip renders an ellipse whose vertical
//! aperture follows the same envelope, so the video carries information
//! about the audio.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use vnsc_tensor::Tensor;

use crate::dsp::SAMPLE_RATE;
use crate::vision::LipClip;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyConfig {
    pub image_size: usize,
    pub fps: u32,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self { image_size: 64, fps: 60 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    /// 48 kHz mono.
    pub samples: Vec<f32>,
    pub lips: LipClip,
}

struct Envelope {
    rates: [f64; 2],
    phases: [f64; 2],
}

impl Envelope {
    fn random(rng: &mut impl Rng) -> Self {
        Self {
            rates: [rng.random_range(2.0..5.0), rng.random_range(0.3..1.0)],
            phases: [rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)],
        }
    }

    fn at(&self, t: f64) -> f64 {
        let a = 0.5 + 0.35 * (2.0 * PI * self.rates[0] * t + self.phases[0]).sin()
            + 0.15 * (2.0 * PI * self.rates[1] * t + self.phases[1]).sin();
        a.clamp(0.02, 1.0)
    }
}

fn render_audio(env: &Envelope, len: usize, rng: &mut impl Rng) -> Vec<f32> {
    let sr = SAMPLE_RATE as f64;
    let f0: f64 = rng.random_range(100.0..220.0);
    let vibrato: f64 = rng.random_range(3.0..6.0);
    let harmonics = 8;
    let pole: f64 = rng.random_range(0.3..0.9);
    let noise_mix: f64 = rng.random_range(0.15..0.4);

    let mut phase = 0.0f64;
    let mut lp = 0.0f64;
    let mut out = Vec::with_capacity(len);
    for n in 0..len {
        let t = n as f64 / sr;
        let f = f0 * (1.0 + 0.01 * (2.0 * PI * vibrato * t).sin());
        phase += 2.0 * PI * f / sr;
        let tone: f64 = (1..=harmonics).map(|h| (h as f64 * phase).sin() / h as f64).sum();
        let white: f64 = rng.sample(StandardNormal);
        lp = pole * lp + (1.0 - pole) * white;
        let mix = (1.0 - noise_mix) * tone / 1.5 + noise_mix * lp;
        out.push((0.3 * env.at(t) * mix) as f32);
    }
    out
}

fn render_lips(env: &Envelope, duration_s: f64, cfg: &ToyConfig, rng: &mut impl Rng) -> LipClip {
    let frames = (duration_s * cfg.fps as f64).ceil().max(1.0) as usize;
    let size = cfg.image_size;
    let drift_rate: f64 = rng.random_range(0.2..0.6);
    let drift_phase: f64 = rng.random_range(0.0..2.0 * PI);
    let plane = size * size;
    let data = (0..frames * plane)
        .map(|i| {
            let (f, p) = (i / plane, i % plane);
            let t = f as f64 / cfg.fps as f64;
            let s = size as f64;
            let cx = 0.5 * s + 0.05 * s * (2.0 * PI * drift_rate * t + drift_phase).sin();
            let cy = 0.5 * s;
            let rx = 0.3 * s;
            let ry = (0.05 + 0.25 * env.at(t)) * s;
            let (x, y) = ((p % size) as f64 + 0.5, (p / size) as f64 + 0.5);
            let d = (((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2)).sqrt();
            let v = 0.1 + 0.8 / (1.0 + (8.0 * (d - 1.0)).exp());
            // Stored clips hold 8-bit pixels; keep generated ones on that grid.
            ((v * 255.0).round() / 255.0) as f32
        })
        .collect();
    LipClip {
        fps_num: cfg.fps,
        fps_den: 1,
        frames: Tensor::new(&[frames, size, size], data).expect("non-empty clip"),
    }
}

/// `n_utts` paired utterances of `duration_s` seconds with 64×64 lips at
/// 60 fps.
pub fn make_toy_dataset(seed: u64, n_utts: usize, duration_s: f64) -> Vec<Utterance> {
    make_toy_dataset_with(seed, n_utts, duration_s, &ToyConfig::default())
}

pub fn make_toy_dataset_with(seed: u64, n_utts: usize, duration_s: f64, cfg: &ToyConfig) -> Vec<Utterance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = (duration_s * SAMPLE_RATE as f64).round() as usize;
    (0..n_utts)
        .map(|_| {
            let env = Envelope::random(&mut rng);
            let samples = render_audio(&env, len, &mut rng);
            let lips = render_lips(&env, duration_s, cfg, &mut rng);
            Utterance { samples, lips }
        })
        .collect()
}
