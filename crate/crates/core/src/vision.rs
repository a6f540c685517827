//! Lip-image analysis and synthesis, plus temporal alignment of lip video
//! to the MDCT frame grid.
//!
//! Analyzer: block 1 is a 3-D conv with stride (1,2,2), then BN and ReLU;
//! later blocks use stride 1 followed by BN, ReLU and 2×2 average pooling.
//! The post-processing block merges the spatial axes, removes them with a
//! linear layer and applies 1-D convs (ReLU between them) down to `D_v`.
//! The synthesizer mirrors this with transposed 3-D convs, each doubling
//! height and width, and an identity output activation.

use std::io::{Read, Write};

use rand::Rng;
use vnsc_tensor::{Conv3dGeometry, Real, Session, Tensor, Var};

use crate::config::VisionConfig;
use crate::error::{config_err, Result, VnscError};
use crate::layers::{self, Init};

/// Rate of the intermediate sample-and-hold sequence.
pub const INTERMEDIATE_HZ: u64 = 150;
/// Repetitions of each intermediate frame (150 Hz → 1200 Hz).
pub const REPEAT: usize = 8;

/// Resamples a `[T, H, W]` clip at `fps_num/fps_den` frames per second to
/// exactly `target_frames` frames on the 1200 Hz grid, `[1, N, H, W]`.
///
/// Frames are chosen by nearest-earlier sample-and-hold at 150 Hz, each
/// repeated 8 times, then truncated or edge-padded to the target length.
pub fn align_video(frames: &Tensor<f32>, fps_num: u32, fps_den: u32, target_frames: usize) -> Result<Tensor<f32>> {
    if frames.rank() != 3 || frames.dim(0) == 0 {
        return Err(config_err(format!("lip clip must be a non-empty [T, H, W] stack, got {:?}", frames.shape())));
    }
    if fps_num == 0 || fps_den == 0 {
        return Err(config_err("frame rate must be positive"));
    }
    let (t, h, w) = (frames.dim(0), frames.dim(1), frames.dim(2));
    let plane = h * w;
    // Number of 150 Hz frames covering the clip: ceil(T·150·den/num).
    let held = (t as u64 * INTERMEDIATE_HZ * fps_den as u64).div_ceil(fps_num as u64) as usize;
    let mut data = Vec::with_capacity(target_frames * plane);
    for n in 0..target_frames {
        let j = (n / REPEAT).min(held.saturating_sub(1));
        let src = ((j as u64 * fps_num as u64) / (INTERMEDIATE_HZ * fps_den as u64)) as usize;
        let src = src.min(t - 1);
        data.extend_from_slice(&frames.data()[src * plane..(src + 1) * plane]);
    }
    Ok(Tensor::new(&[1, target_frames, h, w], data)?)
}

fn analyzer_geom(block: usize) -> Conv3dGeometry {
    if block == 0 {
        Conv3dGeometry::new([1, 2, 2], [1, 1, 1])
    } else {
        Conv3dGeometry::new([1, 1, 1], [1, 1, 1])
    }
}

fn synth_geom() -> Conv3dGeometry {
    Conv3dGeometry::new([1, 2, 2], [1, 1, 1]).with_output_padding([0, 1, 1])
}

pub(crate) fn init_vision<R: Rng>(init: &mut Init<'_, R>, v: &VisionConfig) -> Result<()> {
    let cells = v.final_extent() * v.final_extent();
    let mut cin = 1;
    for (b, &c) in v.channels.iter().enumerate() {
        init.conv3d(&format!("vision.analyzer.block{}.conv", b + 1), c, cin, 3)?;
        init.batch_norm(&format!("vision.analyzer.block{}.bn", b + 1), c)?;
        cin = c;
    }
    init.linear("vision.analyzer.post.merge", 1, cells)?;
    for (j, &c) in v.post_channels.iter().enumerate() {
        init.conv1d(&format!("vision.analyzer.post.conv{}", j + 1), c, cin, 3, 1)?;
        cin = c;
    }

    let mut chain: Vec<usize> = v.post_channels.iter().rev().copied().collect();
    chain.push(*v.channels.last().expect("validated"));
    for (j, pair) in chain.windows(2).enumerate() {
        init.conv1d(&format!("vision.synthesizer.pre.conv{}", j + 1), pair[1], pair[0], 3, 1)?;
    }
    init.linear("vision.synthesizer.pre.split", cells, 1)?;
    let mut ladder: Vec<usize> = v.channels.iter().rev().copied().collect();
    ladder.push(1);
    for (b, pair) in ladder.windows(2).enumerate() {
        init.conv3d_transposed(&format!("vision.synthesizer.block{}.convt", b + 1), pair[0], pair[1], 3)?;
        if b + 2 < ladder.len() {
            init.batch_norm(&format!("vision.synthesizer.block{}.bn", b + 1), pair[1])?;
        }
    }
    Ok(())
}

/// Per-block feature shapes recorded by [`image_analyzer_traced`].
pub type ShapeTrace = Vec<Vec<usize>>;

/// `[1, N, H, W]` lip sequence to `[D_v, N]` visual feature.
pub fn image_analyzer<'g, E: Real>(
    s: &Session<'g, '_, E>,
    v: &VisionConfig,
    lips: &Var<'g, E>,
) -> Result<Var<'g, E>> {
    image_analyzer_traced(s, v, lips).map(|(out, _)| out)
}

/// As [`image_analyzer`], also returning the `[C, N, H, W]` shape after
/// each analysis block.
pub fn image_analyzer_traced<'g, E: Real>(
    s: &Session<'g, '_, E>,
    v: &VisionConfig,
    lips: &Var<'g, E>,
) -> Result<(Var<'g, E>, ShapeTrace)> {
    let shape = lips.shape();
    if shape.len() != 4 || shape[0] != 1 || shape[2] != v.image_size || shape[3] != v.image_size {
        return Err(config_err(format!(
            "lip sequence shape {shape:?}, expected [1, N, {0}, {0}]",
            v.image_size
        )));
    }
    let n = shape[1];
    let mut h = lips.clone();
    let mut trace = Vec::with_capacity(v.channels.len());
    for b in 0..v.channels.len() {
        h = layers::conv3d(s, &format!("vision.analyzer.block{}.conv", b + 1), &h, analyzer_geom(b))?;
        h = layers::batch_norm(s, &format!("vision.analyzer.block{}.bn", b + 1), &h, v.bn_eps, v.bn_momentum)?;
        h = h.relu();
        if b > 0 {
            h = h.avg_pool_hw()?;
        }
        trace.push(h.shape().to_vec());
    }
    let c = h.shape()[0];
    let cells = h.shape()[2] * h.shape()[3];
    let merged = h.reshape(&[c * n, cells])?.transpose()?;
    let h = layers::linear(s, "vision.analyzer.post.merge", &merged)?;
    let mut h = h.reshape(&[c, n])?;
    for j in 0..v.post_channels.len() {
        if j > 0 {
            h = h.relu();
        }
        h = layers::conv1d(s, &format!("vision.analyzer.post.conv{}", j + 1), &h, 1, 1, 1)?;
    }
    Ok((h, trace))
}

/// `[D_v, N]` visual feature to a `[1, N, H, W]` lip sequence.
pub fn image_synthesizer<'g, E: Real>(
    s: &Session<'g, '_, E>,
    v: &VisionConfig,
    feature: &Var<'g, E>,
) -> Result<Var<'g, E>> {
    let shape = feature.shape();
    if shape.len() != 2 || shape[0] != v.d_v() {
        return Err(config_err(format!("visual feature shape {shape:?}, expected [{}, N]", v.d_v())));
    }
    let n = shape[1];
    let mut h = feature.clone();
    for j in 0..v.post_channels.len() {
        if j > 0 {
            h = h.relu();
        }
        h = layers::conv1d(s, &format!("vision.synthesizer.pre.conv{}", j + 1), &h, 1, 1, 1)?;
    }
    let c = h.shape()[0];
    let side = v.final_extent();
    let h = layers::linear(s, "vision.synthesizer.pre.split", &h.reshape(&[1, c * n])?)?;
    let mut h = h.transpose()?.reshape(&[c, n, side, side])?;
    let blocks = v.channels.len();
    for b in 0..blocks {
        h = layers::conv3d_transposed(s, &format!("vision.synthesizer.block{}.convt", b + 1), &h, synth_geom())?;
        if b + 1 < blocks {
            h = layers::batch_norm(s, &format!("vision.synthesizer.block{}.bn", b + 1), &h, v.bn_eps, v.bn_momentum)?;
            h = h.relu();
        }
    }
    Ok(h)
}

/// Mean squared pixel error.
pub fn image_reconstruction_loss<'g, E: Real>(lips: &Var<'g, E>, recon: &Var<'g, E>) -> Result<Var<'g, E>> {
    if lips.shape() != recon.shape() {
        return Err(config_err(format!(
            "image shapes differ: {:?} vs {:?}",
            lips.shape(),
            recon.shape()
        )));
    }
    Ok(recon.mse(lips)?)
}

pub const LIPS_MAGIC: &[u8; 8] = b"VNSCLIPS";
pub const LIPS_VERSION: u32 = 1;

/// Grayscale lip clip as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct LipClip {
    pub fps_num: u32,
    pub fps_den: u32,
    /// `[T, H, W]` in `[0, 1]`.
    pub frames: Tensor<f32>,
}

impl LipClip {
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let (t, h, wd) = (self.frames.dim(0), self.frames.dim(1), self.frames.dim(2));
        let h16 = u16::try_from(h).map_err(|_| VnscError::Format(format!("height {h} exceeds u16")))?;
        let w16 = u16::try_from(wd).map_err(|_| VnscError::Format(format!("width {wd} exceeds u16")))?;
        w.write_all(LIPS_MAGIC)?;
        w.write_all(&LIPS_VERSION.to_le_bytes())?;
        w.write_all(&(t as u32).to_le_bytes())?;
        w.write_all(&self.fps_num.to_le_bytes())?;
        w.write_all(&self.fps_den.to_le_bytes())?;
        w.write_all(&h16.to_le_bytes())?;
        w.write_all(&w16.to_le_bytes())?;
        let bytes: Vec<u8> = self
            .frames
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut head = [0u8; 28];
        r.read_exact(&mut head)
            .map_err(|_| VnscError::Format("lip file shorter than its header".into()))?;
        if &head[..8] != LIPS_MAGIC {
            return Err(VnscError::Format("not a VNSCLIPS file".into()));
        }
        let u32_at = |i: usize| u32::from_le_bytes(head[i..i + 4].try_into().expect("4 bytes"));
        let u16_at = |i: usize| u16::from_le_bytes(head[i..i + 2].try_into().expect("2 bytes"));
        let version = u32_at(8);
        if version != LIPS_VERSION {
            return Err(VnscError::Format(format!("unsupported lip file version {version}")));
        }
        let (t, fps_num, fps_den) = (u32_at(12) as usize, u32_at(16), u32_at(20));
        let (h, w) = (u16_at(24) as usize, u16_at(26) as usize);
        if t == 0 || h == 0 || w == 0 || fps_num == 0 || fps_den == 0 {
            return Err(VnscError::Format("lip file declares an empty clip or zero frame rate".into()));
        }
        let mut bytes = vec![0u8; t * h * w];
        r.read_exact(&mut bytes)
            .map_err(|_| VnscError::Format(format!("lip file truncated: expected {} pixel bytes", t * h * w)))?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(VnscError::Format(format!("{} trailing bytes after lip frames", rest.len())));
        }
        let frames = Tensor::new(&[t, h, w], bytes.into_iter().map(|b| b as f32 / 255.0).collect())?;
        Ok(Self { fps_num, fps_den, frames })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_second_at_60_fps_fills_1200_frames() {
        let clip = Tensor::from_fn(&[60, 2, 2], |i| (i / 4) as f32);
        let out = align_video(&clip, 60, 1, 1200).unwrap();
        assert_eq!(out.shape(), &[1, 1200, 2, 2]);
        // 150 Hz frame j holds source floor(2j/5); each is repeated 8 times.
        for n in 0..1200 {
            let j = n / 8;
            assert_eq!(out.data()[n * 4], (2 * j / 5) as f32);
        }
    }

    #[test]
    fn pads_with_last_frame() {
        let clip = Tensor::from_fn(&[2, 1, 1], |i| i as f32);
        let out = align_video(&clip, 60, 1, 100).unwrap();
        assert_eq!(*out.data().last().unwrap(), 1.0);
    }

    #[test]
    fn malformed_clip_is_rejected() {
        assert!(align_video(&Tensor::zeros(&[4, 4]), 60, 1, 10).is_err());
        assert!(align_video(&Tensor::zeros(&[1, 2, 2]), 0, 1, 10).is_err());
    }
}
