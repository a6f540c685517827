//! Signal processing: MDCT analysis/synthesis, the log-mel loss front end,
//! quality metrics and WAV ingestion.

mod mdct;
mod mel;
mod metrics;
mod wav;

pub use mdct::{imdct, mdct, Mdct};
pub use mel::{hz_to_mel, mel_spectrogram, mel_to_hz, MelConfig, MelSpectrogram};
pub use metrics::{add_noise, global_snr, ssnr, SSNR_MAX_DB, SSNR_MIN_DB, SSNR_SEGMENT};
pub use wav::{read_wav, read_wav_from, write_wav, write_wav_to, SAMPLE_RATE};
