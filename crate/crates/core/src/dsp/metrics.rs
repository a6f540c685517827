use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{config_err, Result};

pub const SSNR_SEGMENT: usize = 320;
pub const SSNR_MIN_DB: f64 = -10.0;
pub const SSNR_MAX_DB: f64 = 35.0;

/// Segmental SNR in dB over non-overlapping 320-sample segments.
///
/// Inputs are truncated to the shorter length. Each segment's SNR is clamped
/// to `[-10, 35]` dB before averaging; a trailing partial segment counts only
/// when there is no full one. A silent clean segment scores the floor.
pub fn ssnr(clean: &[f32], decoded: &[f32]) -> f64 {
    let len = clean.len().min(decoded.len());
    if len == 0 {
        return SSNR_MIN_DB;
    }
    let seg = if len >= SSNR_SEGMENT { SSNR_SEGMENT } else { len };
    let count = len / seg;
    let mut total = 0.0;
    for s in 0..count {
        let range = s * seg..(s + 1) * seg;
        let (mut signal, mut noise) = (0.0f64, 0.0f64);
        for (&c, &d) in clean[range.clone()].iter().zip(&decoded[range]) {
            signal += c as f64 * c as f64;
            noise += (c as f64 - d as f64).powi(2);
        }
        total += segment_snr(signal, noise);
    }
    total / count as f64
}

fn segment_snr(signal: f64, noise: f64) -> f64 {
    if signal == 0.0 {
        return SSNR_MIN_DB;
    }
    if noise == 0.0 {
        return SSNR_MAX_DB;
    }
    (10.0 * (signal / noise).log10()).clamp(SSNR_MIN_DB, SSNR_MAX_DB)
}

/// Global SNR of `noisy` relative to `clean` in dB.
pub fn global_snr(clean: &[f32], noisy: &[f32]) -> f64 {
    let (mut signal, mut noise) = (0.0f64, 0.0f64);
    for (&c, &n) in clean.iter().zip(noisy) {
        signal += c as f64 * c as f64;
        noise += (n as f64 - c as f64).powi(2);
    }
    10.0 * (signal / noise).log10()
}

/// Adds seeded white Gaussian noise scaled to the requested global SNR.
///
/// `snr_db = +inf` returns the input unchanged. A silent input admits no
/// finite SNR and is rejected.
pub fn add_noise(samples: &[f32], snr_db: f64, seed: u64) -> Result<Vec<f32>> {
    if snr_db == f64::INFINITY {
        return Ok(samples.to_vec());
    }
    if !snr_db.is_finite() {
        return Err(config_err(format!("SNR must be finite or +inf, got {snr_db}")));
    }
    let signal: f64 = samples.iter().map(|&s| s as f64 * s as f64).sum();
    if signal == 0.0 {
        return Err(config_err("cannot add noise at a fixed SNR to a silent signal"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..samples.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let noise_energy: f64 = noise.iter().map(|n| n * n).sum();
    let gain = (signal / (noise_energy * 10f64.powf(snr_db / 10.0))).sqrt();
    Ok(samples
        .iter()
        .zip(&noise)
        .map(|(&s, &n)| (s as f64 + gain * n) as f32)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_signals_hit_ceiling() {
        let x: Vec<f32> = (0..1000).map(|i| (i as f32 * 0.01).sin()).collect();
        assert_eq!(ssnr(&x, &x), SSNR_MAX_DB);
    }

    #[test]
    fn silent_reference_is_floor() {
        let z = vec![0.0f32; 640];
        assert_eq!(ssnr(&z, &z), SSNR_MIN_DB);
        assert_eq!(ssnr(&z, &[0.5; 640]), SSNR_MIN_DB);
    }
}
