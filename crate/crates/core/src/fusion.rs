//! Bimodal feature fusion and the distillation loss.
//!
//! `fuse` concatenates the speech feature `X_i [D_s, N]` with the visual
//! feature `V [D_v, N]` and maps the result back to `D_s` with a linear
//! layer. The distillation loss is
//!
//! `L_D = ln(1 + exp(-tr(Xᵀ X̃) / (max(‖X‖_F, ε)·max(‖X̃‖_F, ε))))`
//!
//! evaluated in `f64` as a single fused op.

use rand::Rng;
use vnsc_tensor::{softplus_scalar, sigmoid_scalar, Real, Session, Tensor, Var};

use crate::error::{Result, VnscError};
use crate::layers::{self, Init};

pub const FUSION_LINEAR: &str = "fusion.linear";

/// Region name under which all visual-path ops are counted.
pub const VISUAL_REGION: &str = "visual";

pub(crate) fn init_fusion<R: Rng>(init: &mut Init<'_, R>, d_s: usize, d_v: usize) -> Result<()> {
    init.linear(FUSION_LINEAR, d_s, d_s + d_v)
}

/// `[Identity | 0]` fusion weights with zero bias: passes `X_i` through.
pub fn neutral_fusion_weights(d_s: usize, d_v: usize) -> (Tensor<f32>, Tensor<f32>) {
    let w = Tensor::from_fn(&[d_s, d_s + d_v], |i| {
        let (r, c) = (i / (d_s + d_v), i % (d_s + d_v));
        if r == c {
            1.0
        } else {
            0.0
        }
    });
    (w, Tensor::zeros(&[d_s]))
}

/// `linear([x; v])`, shape `[D_s, N]`.
pub fn fuse<'g, E: Real>(s: &Session<'g, '_, E>, x: &Var<'g, E>, v: &Var<'g, E>) -> Result<Var<'g, E>> {
    let n = x.shape()[1];
    if v.shape().len() != 2 || v.shape()[1] != n {
        return Err(VnscError::Alignment {
            what: "visual feature",
            expected: n,
            found: v.shape().get(1).copied().unwrap_or(0),
        });
    }
    let joint = Var::concat(&[x, v])?;
    layers::linear(s, FUSION_LINEAR, &joint)
}

fn norm_terms(x: &[f64], xt: &[f64], eps: f64) -> (f64, f64, f64, f64, f64) {
    let trace: f64 = x.iter().zip(xt).map(|(a, b)| a * b).sum();
    let nx = x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nxt = xt.iter().map(|a| a * a).sum::<f64>().sqrt();
    let (a, b) = (nx.max(eps), nxt.max(eps));
    (trace, nx, nxt, a, b)
}

/// Distillation loss of two equally shaped feature matrices.
pub fn distillation_loss_value(x: &[f64], x_tilde: &[f64], eps: f64) -> f64 {
    assert_eq!(x.len(), x_tilde.len(), "distillation features must have equal size");
    let (trace, _, _, a, b) = norm_terms(x, x_tilde, eps);
    softplus_scalar(-trace / (a * b))
}

/// Differentiable distillation loss; gradients flow into both arguments.
pub fn distillation_loss<'g, E: Real>(x: &Var<'g, E>, x_tilde: &Var<'g, E>, eps: f64) -> Result<Var<'g, E>> {
    if x.shape() != x_tilde.shape() {
        return Err(VnscError::Config(format!(
            "distillation features differ in shape: {:?} vs {:?}",
            x.shape(),
            x_tilde.shape()
        )));
    }
    let xs: Vec<f64> = x.value().data().iter().map(|v| v.to_f64()).collect();
    let ts: Vec<f64> = x_tilde.value().data().iter().map(|v| v.to_f64()).collect();
    let (trace, nx, nxt, a, b) = norm_terms(&xs, &ts, eps);
    let r = trace / (a * b);
    let value = softplus_scalar(-r);
    let shape = x.shape().to_vec();
    let out = Tensor::scalar(E::from_f64(value));
    Ok(x.graph().record(out, &[x, x_tilde], move |g, mask| {
        // dL/dr = -sigmoid(-r)
        let up = g.item().to_f64() * -sigmoid_scalar(-r);
        // dr/dX = X̃/(ab) - r·X/‖X‖² while the norm is above the floor.
        let side = |own: &[f64], other: &[f64], norm: f64, floor_active: bool| {
            let data = own
                .iter()
                .zip(other)
                .map(|(&o, &t)| {
                    let mut d = t / (a * b);
                    if !floor_active {
                        d -= r * o / (norm * norm);
                    }
                    E::from_f64(up * d)
                })
                .collect();
            Tensor::new(&shape, data).expect("shape")
        };
        vec![
            mask[0].then(|| side(&xs, &ts, nx, nx <= eps)),
            mask[1].then(|| side(&ts, &xs, nxt, nxt <= eps)),
        ]
    }))
}

/// How visual information enters the encoder.
#[derive(Clone)]
pub enum Fusion<'g, E: Real> {
    AudioOnly,
    /// Explicit fusion with the given visual feature.
    Va(Var<'g, E>),
    /// Speech path unchanged; the distillation loss against the fused
    /// feature is returned.
    VuaTraining(Var<'g, E>),
    /// Speech path only; no visual computation.
    VuaInference,
}

impl<E: Real> Fusion<'_, E> {
    pub fn name(&self) -> &'static str {
        match self {
            Fusion::AudioOnly => "audio-only",
            Fusion::Va(_) => "VA",
            Fusion::VuaTraining(_) => "VUA training",
            Fusion::VuaInference => "VUA inference",
        }
    }
}

/// Next block input and, in VUA training, the distillation term.
pub fn apply_fusion_strategy<'g, E: Real>(
    s: &Session<'g, '_, E>,
    fusion: &Fusion<'g, E>,
    x_i: &Var<'g, E>,
    eps: f64,
) -> Result<(Var<'g, E>, Option<Var<'g, E>>)> {
    match fusion {
        Fusion::AudioOnly | Fusion::VuaInference => Ok((x_i.clone(), None)),
        Fusion::Va(v) => {
            let _region = s.graph().enter_region(VISUAL_REGION);
            Ok((fuse(s, x_i, v)?, None))
        }
        Fusion::VuaTraining(v) => {
            let _region = s.graph().enter_region(VISUAL_REGION);
            let fused = fuse(s, x_i, v)?;
            let ld = distillation_loss(x_i, &fused, eps)?;
            Ok((x_i.clone(), Some(ld)))
        }
    }
}
