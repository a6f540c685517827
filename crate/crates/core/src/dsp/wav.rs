use std::io::{Read, Seek, Write};
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Result, VnscError};

pub const SAMPLE_RATE: u32 = 48_000;

fn spec() -> WavSpec {
    WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    }
}

/// Reads PCM16 mono 48 kHz audio, scaled by 1/32768.
pub fn read_wav_from<R: Read>(reader: R) -> Result<Vec<f32>> {
    let reader = WavReader::new(reader)?;
    let s = reader.spec();
    if s.channels != 1 || s.bits_per_sample != 16 || s.sample_format != SampleFormat::Int {
        return Err(VnscError::Format(format!(
            "expected PCM16 mono, got {} channel(s), {} bits, {:?}",
            s.channels, s.bits_per_sample, s.sample_format
        )));
    }
    if s.sample_rate != SAMPLE_RATE {
        return Err(VnscError::Format(format!(
            "sample rate {} Hz is not supported, expected {SAMPLE_RATE} Hz",
            s.sample_rate
        )));
    }
    reader
        .into_samples::<i16>()
        .map(|r| r.map(|v| v as f32 / 32768.0).map_err(VnscError::from))
        .collect()
}

pub fn read_wav(path: &Path) -> Result<Vec<f32>> {
    read_wav_from(std::io::BufReader::new(std::fs::File::open(path)?))
}

fn quantize(sample: f32) -> i16 {
    (sample as f64 * 32768.0).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

pub fn write_wav_to<W: Write + Seek>(writer: W, samples: &[f32]) -> Result<()> {
    let mut w = WavWriter::new(writer, spec())?;
    for &s in samples {
        w.write_sample(quantize(s))?;
    }
    w.finalize()?;
    Ok(())
}

pub fn write_wav(path: &Path, samples: &[f32]) -> Result<()> {
    write_wav_to(std::io::BufWriter::new(std::fs::File::create(path)?), samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn pcm16_values_round_trip_exactly() {
        let samples: Vec<f32> = [-32768i32, -1, 0, 1, 12345, 32767]
            .iter()
            .map(|&v| v as f32 / 32768.0)
            .collect();
        let mut buf = Cursor::new(Vec::new());
        write_wav_to(&mut buf, &samples).unwrap();
        buf.set_position(0);
        assert_eq!(read_wav_from(buf).unwrap(), samples);
    }

    #[test]
    fn out_of_range_samples_saturate() {
        assert_eq!(quantize(2.0), i16::MAX);
        assert_eq!(quantize(-2.0), i16::MIN);
    }
}
