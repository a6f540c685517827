//! `VNSCBITS` bitstreams.
//!
//! A 30-byte little-endian header (magic, version u32, mode u8, sample rate
//! u32, frame shift u16, downsampling factor u16, Q u8, K u32, latent frames
//! u32) followed by the code indices, `ceil(log2 K)` bits each, most
//! significant bit first, stage-major then frame-major, zero-padded to a
//! whole byte.

use std::io::{Read, Write};
use std::path::Path;

use vnsc::config::{bits_for, ModelConfig, Scenario};
use vnsc::rvq::CodeIndices;
use vnsc::{Result, VnscError};

pub const BITS_MAGIC: &[u8; 8] = b"VNSCBITS";
pub const BITS_VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BitstreamHeader {
    pub mode: Scenario,
    pub sample_rate: u32,
    pub frame_shift: u16,
    pub downsample: u16,
    pub stages: u8,
    pub entries: u32,
    pub n_latent_frames: u32,
}

impl BitstreamHeader {
    /// Header for codes produced by a model with `cfg` in `mode`.
    pub fn for_model(cfg: &ModelConfig, mode: Scenario, n_latent_frames: usize) -> Result<Self> {
        let narrow = |what: &str, v: usize| VnscError::Format(format!("{what} {v} does not fit the bitstream header"));
        Ok(Self {
            mode,
            sample_rate: cfg.codec.sample_rate,
            frame_shift: u16::try_from(cfg.codec.frame_shift).map_err(|_| narrow("frame shift", cfg.codec.frame_shift))?,
            downsample: u16::try_from(cfg.codec.downsample).map_err(|_| narrow("downsampling factor", cfg.codec.downsample))?,
            stages: u8::try_from(cfg.rvq.stages).map_err(|_| narrow("stage count", cfg.rvq.stages))?,
            entries: u32::try_from(cfg.rvq.entries).map_err(|_| narrow("codebook size", cfg.rvq.entries))?,
            n_latent_frames: u32::try_from(n_latent_frames).map_err(|_| narrow("latent frame count", n_latent_frames))?,
        })
    }

    pub fn bits_per_index(&self) -> u32 {
        bits_for(self.entries as usize)
    }

    pub fn payload_bits(&self) -> u64 {
        self.n_latent_frames as u64 * self.stages as u64 * self.bits_per_index() as u64
    }

    /// Samples produced by decoding.
    pub fn decoded_samples(&self) -> usize {
        self.n_latent_frames as usize * self.downsample as usize * self.frame_shift as usize
    }

    /// Fails unless the codec hyperparameters equal the model's and the
    /// mode can be served by the model's scenario.
    pub fn check_model(&self, cfg: &ModelConfig) -> Result<()> {
        let fields = [
            ("sample rate", self.sample_rate as usize, cfg.codec.sample_rate as usize),
            ("frame shift", self.frame_shift as usize, cfg.codec.frame_shift),
            ("downsampling factor", self.downsample as usize, cfg.codec.downsample),
            ("stage count", self.stages as usize, cfg.rvq.stages),
            ("codebook size", self.entries as usize, cfg.rvq.entries),
        ];
        for (what, stream, model) in fields {
            if stream != model {
                return Err(VnscError::Format(format!(
                    "bitstream {what} is {stream}, the model uses {model}"
                )));
            }
        }
        if !mode_supported(cfg.scenario, self.mode) {
            return Err(VnscError::Format(format!(
                "bitstream was encoded in {} mode, the model is a {} model",
                self.mode, cfg.scenario
            )));
        }
        Ok(())
    }

    fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(BITS_MAGIC)?;
        w.write_all(&BITS_VERSION.to_le_bytes())?;
        w.write_all(&[self.mode.code()])?;
        w.write_all(&self.sample_rate.to_le_bytes())?;
        w.write_all(&self.frame_shift.to_le_bytes())?;
        w.write_all(&self.downsample.to_le_bytes())?;
        w.write_all(&[self.stages])?;
        w.write_all(&self.entries.to_le_bytes())?;
        w.write_all(&self.n_latent_frames.to_le_bytes())?;
        Ok(())
    }

    fn parse(b: &[u8; HEADER_BYTES]) -> Result<Self> {
        if &b[..8] != BITS_MAGIC {
            return Err(VnscError::Format("not a VNSCBITS file".into()));
        }
        let u16_at = |i: usize| u16::from_le_bytes([b[i], b[i + 1]]);
        let u32_at = |i: usize| u32::from_le_bytes(b[i..i + 4].try_into().expect("4 bytes"));
        let version = u32_at(8);
        if version != BITS_VERSION {
            return Err(VnscError::Format(format!("unsupported bitstream version {version}")));
        }
        let mode = Scenario::from_code(b[12]).ok_or_else(|| VnscError::Format(format!("unknown mode byte {}", b[12])))?;
        let header = Self {
            mode,
            sample_rate: u32_at(13),
            frame_shift: u16_at(17),
            downsample: u16_at(19),
            stages: b[21],
            entries: u32_at(22),
            n_latent_frames: u32_at(26),
        };
        if header.stages == 0 || header.entries < 2 || header.frame_shift == 0 || header.downsample == 0 {
            return Err(VnscError::Format("bitstream header declares an empty codec".into()));
        }
        Ok(header)
    }
}

/// Whether a model trained for `model` can encode or decode `mode` streams.
/// A VUA model also serves audio-only streams, with identical codes.
pub fn mode_supported(model: Scenario, mode: Scenario) -> bool {
    model == mode || (model == Scenario::Vua && mode == Scenario::AudioOnly)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedBitstream {
    pub header: BitstreamHeader,
    /// `[Q][n_latent_frames]`
    pub indices: CodeIndices,
}

impl EncodedBitstream {
    pub fn new(header: BitstreamHeader, indices: CodeIndices) -> Result<Self> {
        let (q, t) = (header.stages as usize, header.n_latent_frames as usize);
        if indices.len() != q || indices.iter().any(|s| s.len() != t) {
            return Err(VnscError::Format(format!(
                "indices do not form {q} stages of {t} frames"
            )));
        }
        if let Some(&bad) = indices.iter().flatten().find(|&&i| i >= header.entries) {
            return Err(VnscError::Format(format!(
                "index {bad} out of range for {} codewords",
                header.entries
            )));
        }
        Ok(Self { header, indices })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES + self.header.payload_bits().div_ceil(8) as usize);
        self.header.write_to(&mut out).expect("writing to a vector");
        let bits = self.header.bits_per_index();
        let mut acc: u64 = 0;
        let mut filled = 0u32;
        for &idx in self.indices.iter().flatten() {
            acc = (acc << bits) | idx as u64;
            filled += bits;
            while filled >= 8 {
                filled -= 8;
                out.push((acc >> filled) as u8);
            }
            acc &= (1u64 << filled) - 1;
        }
        if filled > 0 {
            out.push((acc << (8 - filled)) as u8);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let head: &[u8; HEADER_BYTES] = bytes
            .get(..HEADER_BYTES)
            .and_then(|h| h.try_into().ok())
            .ok_or_else(|| VnscError::Format(format!("bitstream shorter than its {HEADER_BYTES}-byte header")))?;
        let header = BitstreamHeader::parse(head)?;
        let payload = &bytes[HEADER_BYTES..];
        let expected = header.payload_bits();
        let needed = expected.div_ceil(8);
        let found = payload.len() as u64 * 8;
        if (payload.len() as u64) < needed {
            return Err(VnscError::TruncatedPayload { expected, found });
        }
        if payload.len() as u64 > needed {
            return Err(VnscError::Format(format!(
                "{} bytes after the declared payload of {expected} bits",
                payload.len() as u64 - needed
            )));
        }
        let bits = header.bits_per_index();
        let (q, t) = (header.stages as usize, header.n_latent_frames as usize);
        let mut reader = payload.iter();
        let mut acc: u64 = 0;
        let mut filled = 0u32;
        let mut indices = vec![Vec::with_capacity(t); q];
        for stage in indices.iter_mut() {
            for _ in 0..t {
                while filled < bits {
                    acc = (acc << 8) | *reader.next().expect("length checked") as u64;
                    filled += 8;
                }
                filled -= bits;
                stage.push(((acc >> filled) & ((1u64 << bits) - 1)) as u32);
                acc &= (1u64 << filled) - 1;
            }
        }
        if acc != 0 {
            return Err(VnscError::Format("nonzero padding bits after the payload".into()));
        }
        Self::new(header, indices)
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }
}
