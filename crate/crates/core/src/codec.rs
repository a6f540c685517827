//! Speech encoder and decoder.
//!
//! Encoder: plain conv + LN, `n_blocks` MCNX v2 blocks with the fusion hook
//! after block `i`, then LN, linear, strided downsampling conv and a plain
//! conv to `D_code`. The decoder mirrors it: plain conv, transposed
//! upsampling conv, linear, LN, the blocks, LN and a plain conv to `M` bins.

use rand::Rng;
use vnsc_tensor::{Real, Session, Var};

use crate::config::{CodecConfig, ModelConfig, Scenario};
use crate::error::{config_err, Result, VnscError};
use crate::fusion::{apply_fusion_strategy, Fusion};
use crate::layers::{self, Init};

pub(crate) fn init_block<R: Rng>(init: &mut Init<'_, R>, prefix: &str, c: &CodecConfig) -> Result<()> {
    let hidden = c.expansion * c.d_s;
    init.conv1d(&format!("{prefix}.dwconv"), c.d_s, c.d_s, c.dw_kernel, c.d_s)?;
    init.norm(&format!("{prefix}.norm"), c.d_s)?;
    init.linear(&format!("{prefix}.pwconv1"), hidden, c.d_s)?;
    init.grn(&format!("{prefix}.grn"), hidden)?;
    init.linear(&format!("{prefix}.pwconv2"), c.d_s, hidden)
}

pub(crate) fn init_codec<R: Rng>(init: &mut Init<'_, R>, cfg: &ModelConfig) -> Result<()> {
    let c = &cfg.codec;
    let (m, k) = (c.frame_shift, c.plain_kernel);
    let rk = c.resample_kernel();

    init.conv1d("encoder.pre.conv", c.d_s, m, k, 1)?;
    init.norm("encoder.pre.norm", c.d_s)?;
    for b in 1..=c.n_blocks {
        init_block(init, &format!("encoder.block{b}"), c)?;
    }
    init.norm("encoder.post.norm", c.d_s)?;
    init.linear("encoder.post.linear", c.d_s, c.d_s)?;
    init.conv1d("encoder.post.down", c.d_s, c.d_s, rk, 1)?;
    init.conv1d("encoder.post.conv", c.d_code, c.d_s, k, 1)?;

    init.conv1d("decoder.pre.conv", c.d_s, c.d_code, k, 1)?;
    init.conv1d_transposed("decoder.pre.up", c.d_s, c.d_s, rk)?;
    init.linear("decoder.pre.linear", c.d_s, c.d_s)?;
    init.norm("decoder.pre.norm", c.d_s)?;
    for b in 1..=c.n_blocks {
        init_block(init, &format!("decoder.block{b}"), c)?;
    }
    init.norm("decoder.post.norm", c.d_s)?;
    init.conv1d("decoder.post.conv", m, c.d_s, k, 1)
}

/// `x + pwconv2(grn(gelu(pwconv1(ln(dwconv(x))))))`
pub fn mcnx_v2_block<'g, E: Real>(
    s: &Session<'g, '_, E>,
    prefix: &str,
    x: &Var<'g, E>,
    c: &CodecConfig,
) -> Result<Var<'g, E>> {
    let h = layers::conv1d(s, &format!("{prefix}.dwconv"), x, 1, c.dw_kernel / 2, c.d_s)?;
    let h = layers::layer_norm(s, &format!("{prefix}.norm"), &h, c.ln_eps)?;
    let h = layers::linear(s, &format!("{prefix}.pwconv1"), &h)?.gelu();
    let h = layers::grn(s, &format!("{prefix}.grn"), &h, c.grn_eps)?;
    let h = layers::linear(s, &format!("{prefix}.pwconv2"), &h)?;
    Ok(x.add(&h)?)
}

pub struct EncoderOutput<'g, E: Real> {
    /// `[D_code, N / downsample]`
    pub latent: Var<'g, E>,
    /// Output of block `i`, `[D_s, N]`.
    pub feature: Var<'g, E>,
    /// Distillation term, VUA training only.
    pub distill: Option<Var<'g, E>>,
}

fn check_fusion<E: Real>(scenario: Scenario, fusion: &Fusion<'_, E>) -> Result<()> {
    let ok = matches!(
        (scenario, fusion),
        (Scenario::AudioOnly, Fusion::AudioOnly)
            | (Scenario::Va, Fusion::Va(_))
            | (Scenario::Vua, Fusion::VuaTraining(_) | Fusion::VuaInference | Fusion::AudioOnly)
    );
    if ok {
        Ok(())
    } else if scenario == Scenario::Va {
        Err(VnscError::Usage("VA mode requires a visual feature".into()))
    } else {
        Err(VnscError::Usage(format!(
            "{} fusion is not available for a {scenario} model",
            fusion.name()
        )))
    }
}

/// Encodes an MDCT spectrum `[M, N]`; `N` must be a multiple of the
/// downsampling factor.
pub fn encoder_forward<'g, E: Real>(
    s: &Session<'g, '_, E>,
    cfg: &ModelConfig,
    spec: &Var<'g, E>,
    fusion: Fusion<'g, E>,
) -> Result<EncoderOutput<'g, E>> {
    let c = &cfg.codec;
    check_fusion(cfg.scenario, &fusion)?;
    if spec.shape().len() != 2 || spec.shape()[0] != c.frame_shift {
        return Err(config_err(format!(
            "spectrum shape {:?} does not have {} bins",
            spec.shape(),
            c.frame_shift
        )));
    }
    let n = spec.shape()[1];
    if n == 0 || n % c.downsample != 0 {
        return Err(config_err(format!(
            "{n} frames is not a positive multiple of the downsampling factor {}",
            c.downsample
        )));
    }
    if let Fusion::Va(v) | Fusion::VuaTraining(v) = &fusion {
        if v.shape().len() != 2 || v.shape()[1] != n {
            return Err(VnscError::Alignment {
                what: "visual feature",
                expected: n,
                found: v.shape().get(1).copied().unwrap_or(0),
            });
        }
    }

    let pad = c.plain_kernel / 2;
    let h = layers::conv1d(s, "encoder.pre.conv", spec, 1, pad, 1)?;
    let mut h = layers::layer_norm(s, "encoder.pre.norm", &h, c.ln_eps)?;
    let mut feature = None;
    let mut distill = None;
    for b in 1..=c.n_blocks {
        h = mcnx_v2_block(s, &format!("encoder.block{b}"), &h, c)?;
        if b == c.fusion_index {
            let (next, ld) = apply_fusion_strategy(s, &fusion, &h, cfg.fusion_eps)?;
            feature = Some(h);
            distill = ld;
            h = next;
        }
    }
    let h = layers::layer_norm(s, "encoder.post.norm", &h, c.ln_eps)?;
    let h = layers::linear(s, "encoder.post.linear", &h)?;
    let h = layers::conv1d(s, "encoder.post.down", &h, c.downsample, c.resample_padding(), 1)?;
    let latent = layers::conv1d(s, "encoder.post.conv", &h, 1, pad, 1)?;
    Ok(EncoderOutput {
        latent,
        feature: feature.expect("fusion index validated"),
        distill,
    })
}

/// Decodes a (quantized) latent `[D_code, T]` into an MDCT spectrum
/// `[M, T·downsample]`.
pub fn decoder_forward<'g, E: Real>(
    s: &Session<'g, '_, E>,
    cfg: &ModelConfig,
    latent: &Var<'g, E>,
) -> Result<Var<'g, E>> {
    let c = &cfg.codec;
    if latent.shape().len() != 2 || latent.shape()[0] != c.d_code {
        return Err(config_err(format!(
            "latent shape {:?} does not have {} channels",
            latent.shape(),
            c.d_code
        )));
    }
    let pad = c.plain_kernel / 2;
    let h = layers::conv1d(s, "decoder.pre.conv", latent, 1, pad, 1)?;
    let h = layers::conv1d_transposed(s, "decoder.pre.up", &h, c.downsample, c.resample_padding())?;
    let h = layers::linear(s, "decoder.pre.linear", &h)?;
    let mut h = layers::layer_norm(s, "decoder.pre.norm", &h, c.ln_eps)?;
    for b in 1..=c.n_blocks {
        h = mcnx_v2_block(s, &format!("decoder.block{b}"), &h, c)?;
    }
    let h = layers::layer_norm(s, "decoder.post.norm", &h, c.ln_eps)?;
    layers::conv1d(s, "decoder.post.conv", &h, 1, pad, 1)
}
