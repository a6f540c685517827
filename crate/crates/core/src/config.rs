//! Model hyperparameters and the `key=value` text format used for training
//! configs and checkpoint echoes.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{config_err, Result, VnscError};

/// Whether lip video is used, and how.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scenario {
    AudioOnly,
    /// Visual features fused explicitly at inference.
    Va,
    /// Visual features distilled into the speech path during training only.
    Vua,
}

impl Scenario {
    pub fn code(self) -> u8 {
        match self {
            Scenario::AudioOnly => 0,
            Scenario::Va => 1,
            Scenario::Vua => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Scenario::AudioOnly),
            1 => Some(Scenario::Va),
            2 => Some(Scenario::Vua),
            _ => None,
        }
    }

    pub fn uses_vision(self) -> bool {
        self != Scenario::AudioOnly
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::AudioOnly => "audio",
            Scenario::Va => "va",
            Scenario::Vua => "vua",
        })
    }
}

impl FromStr for Scenario {
    type Err = VnscError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "audio" | "audio-only" | "audio_only" => Ok(Scenario::AudioOnly),
            "va" => Ok(Scenario::Va),
            "vua" => Ok(Scenario::Vua),
            other => Err(VnscError::Usage(format!(
                "unknown scenario `{other}` (expected audio, va or vua)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodecConfig {
    pub sample_rate: u32,
    pub frame_shift: usize,
    pub n_blocks: usize,
    pub d_s: usize,
    pub d_code: usize,
    /// Block after which visual information enters (1-based).
    pub fusion_index: usize,
    pub downsample: usize,
    pub dw_kernel: usize,
    pub expansion: usize,
    /// Kernel of the plain pre/post-processing convolutions.
    pub plain_kernel: usize,
    pub ln_eps: f64,
    pub grn_eps: f64,
}

impl CodecConfig {
    /// Kernel of the down/upsampling convolution.
    pub fn resample_kernel(&self) -> usize {
        if self.downsample % 2 == 0 {
            2 * self.downsample
        } else {
            self.downsample
        }
    }

    pub fn resample_padding(&self) -> usize {
        (self.resample_kernel() - self.downsample) / 2
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RvqConfig {
    pub stages: usize,
    pub entries: usize,
    pub decay: f64,
    pub dead_threshold: f64,
}

impl RvqConfig {
    pub fn bits_per_index(&self) -> u32 {
        bits_for(self.entries)
    }
}

/// `ceil(log2(k))`, at least 1.
pub fn bits_for(k: usize) -> u32 {
    if k <= 2 {
        1
    } else {
        usize::BITS - (k - 1).leading_zeros()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisionConfig {
    pub image_size: usize,
    /// Output channels of the analysis blocks.
    pub channels: Vec<usize>,
    /// Output channels of the 1-D post-processing convolutions.
    pub post_channels: Vec<usize>,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl VisionConfig {
    pub fn d_v(&self) -> usize {
        *self.post_channels.last().expect("validated non-empty")
    }

    /// Spatial extent after the last analysis block.
    pub fn final_extent(&self) -> usize {
        self.image_size >> self.channels.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub scenario: Scenario,
    pub codec: CodecConfig,
    pub rvq: RvqConfig,
    pub vision: VisionConfig,
    pub fusion_eps: f64,
}

impl ModelConfig {
    /// Full-size configuration.
    pub fn standard(scenario: Scenario) -> Self {
        Self {
            scenario,
            codec: CodecConfig {
                sample_rate: 48_000,
                frame_shift: 40,
                n_blocks: 8,
                d_s: 256,
                d_code: 256,
                fusion_index: 2,
                downsample: 8,
                dw_kernel: 7,
                expansion: 2,
                plain_kernel: 7,
                ln_eps: 1e-6,
                grn_eps: 1e-6,
            },
            rvq: RvqConfig {
                stages: 4,
                entries: 1024,
                decay: 0.99,
                dead_threshold: 1e-3,
            },
            vision: VisionConfig {
                image_size: 64,
                channels: vec![32, 64, 128, 256, 512],
                post_channels: vec![256, 256, 64, 64],
                bn_eps: 1e-5,
                bn_momentum: 0.1,
            },
            fusion_eps: 1e-6,
        }
    }

    /// Small configuration for CPU experiments and gradient audits.
    pub fn miniature(scenario: Scenario) -> Self {
        let mut cfg = Self::standard(scenario);
        cfg.codec.n_blocks = 2;
        cfg.codec.d_s = 16;
        cfg.codec.d_code = 16;
        cfg.codec.fusion_index = 1;
        cfg.rvq.stages = 2;
        cfg.rvq.entries = 8;
        cfg.vision = VisionConfig {
            image_size: 8,
            channels: vec![4, 8],
            post_channels: vec![8, 8],
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        };
        cfg
    }

    pub fn d_v(&self) -> usize {
        self.vision.d_v()
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.codec;
        if c.frame_shift == 0 || c.frame_shift % 2 != 0 {
            return Err(config_err(format!("frame_shift {} must be positive and even", c.frame_shift)));
        }
        if c.n_blocks < 2 || c.fusion_index < 1 || c.fusion_index > c.n_blocks - 1 {
            return Err(config_err(format!(
                "fusion_index {} must lie in 1..={} for {} blocks",
                c.fusion_index,
                c.n_blocks.saturating_sub(1),
                c.n_blocks
            )));
        }
        if c.d_s == 0 || c.d_code == 0 || c.expansion == 0 || c.downsample == 0 {
            return Err(config_err("dimensions and downsample factor must be positive"));
        }
        if c.dw_kernel % 2 == 0 || c.plain_kernel % 2 == 0 {
            return Err(config_err("depth-wise and plain kernels must be odd"));
        }
        if self.rvq.stages == 0 || self.rvq.entries == 0 {
            return Err(config_err("RVQ needs at least one stage and one codeword"));
        }
        if !(0.0..1.0).contains(&self.rvq.decay) {
            return Err(config_err(format!("RVQ decay {} outside [0, 1)", self.rvq.decay)));
        }
        let v = &self.vision;
        if v.channels.is_empty() || v.post_channels.is_empty() {
            return Err(config_err("vision channel lists must be non-empty"));
        }
        if v.image_size == 0 || v.image_size % (1 << v.channels.len()) != 0 {
            return Err(config_err(format!(
                "image size {} not divisible by 2^{}",
                v.image_size,
                v.channels.len()
            )));
        }
        if self.fusion_eps <= 0.0 {
            return Err(config_err("fusion epsilon must be positive"));
        }
        Ok(())
    }

    /// Flat `key=value` view of every field.
    pub fn to_kv(&self) -> KeyValues {
        let c = &self.codec;
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut kv = KeyValues::default();
        kv.set("scenario", self.scenario);
        kv.set("sample_rate", c.sample_rate);
        kv.set("frame_shift", c.frame_shift);
        kv.set("n_blocks", c.n_blocks);
        kv.set("d_s", c.d_s);
        kv.set("d_code", c.d_code);
        kv.set("fusion_index", c.fusion_index);
        kv.set("downsample_factor", c.downsample);
        kv.set("dw_kernel", c.dw_kernel);
        kv.set("expansion", c.expansion);
        kv.set("plain_kernel", c.plain_kernel);
        kv.set("ln_eps", c.ln_eps);
        kv.set("grn_eps", c.grn_eps);
        kv.set("rvq_q", self.rvq.stages);
        kv.set("rvq_k", self.rvq.entries);
        kv.set("rvq_decay", self.rvq.decay);
        kv.set("rvq_dead_threshold", self.rvq.dead_threshold);
        kv.set("image_size", self.vision.image_size);
        kv.set("vision_channels", list(&self.vision.channels));
        kv.set("vision_post_channels", list(&self.vision.post_channels));
        kv.set("bn_eps", self.vision.bn_eps);
        kv.set("bn_momentum", self.vision.bn_momentum);
        kv.set("fusion_eps", self.fusion_eps);
        kv
    }

    /// Applies every model key present in `kv` on top of `self`.
    pub fn apply_kv(&mut self, kv: &KeyValues) -> Result<()> {
        let c = &mut self.codec;
        kv.update("scenario", &mut self.scenario)?;
        kv.update("sample_rate", &mut c.sample_rate)?;
        kv.update("frame_shift", &mut c.frame_shift)?;
        kv.update("n_blocks", &mut c.n_blocks)?;
        kv.update("d_s", &mut c.d_s)?;
        kv.update("d_code", &mut c.d_code)?;
        kv.update("fusion_index", &mut c.fusion_index)?;
        kv.update("downsample_factor", &mut c.downsample)?;
        kv.update("dw_kernel", &mut c.dw_kernel)?;
        kv.update("expansion", &mut c.expansion)?;
        kv.update("plain_kernel", &mut c.plain_kernel)?;
        kv.update("ln_eps", &mut c.ln_eps)?;
        kv.update("grn_eps", &mut c.grn_eps)?;
        kv.update("rvq_q", &mut self.rvq.stages)?;
        kv.update("rvq_k", &mut self.rvq.entries)?;
        kv.update("rvq_decay", &mut self.rvq.decay)?;
        kv.update("rvq_dead_threshold", &mut self.rvq.dead_threshold)?;
        kv.update("image_size", &mut self.vision.image_size)?;
        if let Some(v) = kv.get("vision_channels") {
            self.vision.channels = parse_list("vision_channels", v)?;
        }
        if let Some(v) = kv.get("vision_post_channels") {
            self.vision.post_channels = parse_list("vision_post_channels", v)?;
        }
        kv.update("bn_eps", &mut self.vision.bn_eps)?;
        kv.update("bn_momentum", &mut self.vision.bn_momentum)?;
        kv.update("fusion_eps", &mut self.fusion_eps)?;
        self.validate()
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| config_err(format!("`{key}` expects a comma-separated list of integers, got `{v}`")))
        })
        .collect()
}

/// Ordered `key=value` pairs. Blank lines and `#` comments are ignored.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_err(format!("line {}: expected key=value, got `{line}`", i + 1)))?;
            kv.entries.insert(k.trim().to_owned(), v.trim().to_owned());
        }
        Ok(kv)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: &str, value: impl fmt::Display) {
        self.entries.insert(key.to_owned(), value.to_string());
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn extend(&mut self, other: &KeyValues) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    /// Parses `key` into `slot` when present.
    pub fn update<T>(&self, key: &str, slot: &mut T) -> Result<()>
    where
        T: FromStr,
    {
        if let Some(v) = self.get(key) {
            *slot = v
                .parse()
                .map_err(|_| config_err(format!("cannot parse `{key}` value `{v}`")))?;
        }
        Ok(())
    }
}

impl fmt::Display for KeyValues {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_config_hits_six_kbps() {
        let cfg = ModelConfig::standard(Scenario::Va);
        cfg.validate().unwrap();
        let frames_per_s = cfg.codec.sample_rate as usize / cfg.codec.frame_shift / cfg.codec.downsample;
        assert_eq!(frames_per_s, 150);
        assert_eq!(frames_per_s * cfg.rvq.stages * cfg.rvq.bits_per_index() as usize, 6000);
        assert_eq!(cfg.d_v(), 64);
        assert_eq!(cfg.vision.final_extent(), 2);
    }

    #[test]
    fn bits_for_is_ceil_log2() {
        assert_eq!(bits_for(1), 1);
        assert_eq!(bits_for(2), 1);
        assert_eq!(bits_for(3), 2);
        assert_eq!(bits_for(8), 3);
        assert_eq!(bits_for(1000), 10);
        assert_eq!(bits_for(1024), 10);
        assert_eq!(bits_for(1025), 11);
    }

    #[test]
    fn kv_round_trip_restores_config() {
        let cfg = ModelConfig::miniature(Scenario::Vua);
        let text = cfg.to_kv().to_string();
        let mut back = ModelConfig::standard(Scenario::AudioOnly);
        back.apply_kv(&KeyValues::parse(&text).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn scenario_parsing() {
        assert_eq!("VA".parse::<Scenario>().unwrap(), Scenario::Va);
        assert!(matches!("video".parse::<Scenario>(), Err(VnscError::Usage(_))));
        for s in [Scenario::AudioOnly, Scenario::Va, Scenario::Vua] {
            assert_eq!(Scenario::from_code(s.code()), Some(s));
            assert_eq!(s.to_string().parse::<Scenario>().unwrap(), s);
        }
    }
}
