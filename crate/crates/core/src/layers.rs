//! Named-parameter layer helpers shared by the codec, vision and fusion
//! modules, and the matching initialisers.

use rand::Rng;
use vnsc_tensor::init::uniform_fan_in;
use vnsc_tensor::{Conv3dGeometry, ParamStore, Real, Session, Tensor, Var};

use crate::error::Result;

pub(crate) fn conv1d<'g, E: Real>(
    s: &Session<'g, '_, E>,
    prefix: &str,
    x: &Var<'g, E>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Var<'g, E>> {
    let w = s.param(&format!("{prefix}.weight"))?;
    let b = s.param(&format!("{prefix}.bias"))?;
    Ok(x.conv1d(&w, Some(&b), stride, padding, groups)?)
}

pub(crate) fn conv1d_transposed<'g, E: Real>(
    s: &Session<'g, '_, E>,
    prefix: &str,
    x: &Var<'g, E>,
    stride: usize,
    padding: usize,
) -> Result<Var<'g, E>> {
    let w = s.param(&format!("{prefix}.weight"))?;
    let b = s.param(&format!("{prefix}.bias"))?;
    Ok(x.conv1d_transposed(&w, Some(&b), stride, padding, 0)?)
}

pub(crate) fn conv3d<'g, E: Real>(
    s: &Session<'g, '_, E>,
    prefix: &str,
    x: &Var<'g, E>,
    geom: Conv3dGeometry,
) -> Result<Var<'g, E>> {
    let w = s.param(&format!("{prefix}.weight"))?;
    let b = s.param(&format!("{prefix}.bias"))?;
    Ok(x.conv3d(&w, Some(&b), geom)?)
}

pub(crate) fn conv3d_transposed<'g, E: Real>(
    s: &Session<'g, '_, E>,
    prefix: &str,
    x: &Var<'g, E>,
    geom: Conv3dGeometry,
) -> Result<Var<'g, E>> {
    let w = s.param(&format!("{prefix}.weight"))?;
    let b = s.param(&format!("{prefix}.bias"))?;
    Ok(x.conv3d_transposed(&w, Some(&b), geom)?)
}

pub(crate) fn linear<'g, E: Real>(s: &Session<'g, '_, E>, prefix: &str, x: &Var<'g, E>) -> Result<Var<'g, E>> {
    let w = s.param(&format!("{prefix}.weight"))?;
    let b = s.param(&format!("{prefix}.bias"))?;
    Ok(x.linear(&w, Some(&b))?)
}

pub(crate) fn layer_norm<'g, E: Real>(
    s: &Session<'g, '_, E>,
    prefix: &str,
    x: &Var<'g, E>,
    eps: f64,
) -> Result<Var<'g, E>> {
    let g = s.param(&format!("{prefix}.gamma"))?;
    let b = s.param(&format!("{prefix}.beta"))?;
    Ok(x.layer_norm(&g, &b, eps)?)
}

pub(crate) fn grn<'g, E: Real>(s: &Session<'g, '_, E>, prefix: &str, x: &Var<'g, E>, eps: f64) -> Result<Var<'g, E>> {
    let g = s.param(&format!("{prefix}.gamma"))?;
    let b = s.param(&format!("{prefix}.beta"))?;
    Ok(x.grn(&g, &b, eps)?)
}

/// Batch statistics in training sessions (queueing running-stat updates),
/// running statistics otherwise.
pub(crate) fn batch_norm<'g, E: Real>(
    s: &Session<'g, '_, E>,
    prefix: &str,
    x: &Var<'g, E>,
    eps: f64,
    momentum: f64,
) -> Result<Var<'g, E>> {
    let g = s.param(&format!("{prefix}.gamma"))?;
    let b = s.param(&format!("{prefix}.beta"))?;
    let mean_name = format!("{prefix}.running_mean");
    let var_name = format!("{prefix}.running_var");
    if s.training() {
        let (y, stats) = x.batch_norm(&g, &b, None, eps)?;
        let stats = stats.expect("batch statistics in training mode");
        let blend = |old: &Tensor<f32>, new: &Tensor<E>| {
            Tensor::from_fn(old.shape(), |i| {
                ((1.0 - momentum) * old.data()[i] as f64 + momentum * new.data()[i].to_f64()) as f32
            })
        };
        s.push_update(mean_name.clone(), blend(s.tensor(&mean_name)?, &stats.mean));
        s.push_update(var_name.clone(), blend(s.tensor(&var_name)?, &stats.var));
        Ok(y)
    } else {
        let mean = s.tensor(&mean_name)?.cast::<E>();
        let var = s.tensor(&var_name)?.cast::<E>();
        Ok(x.batch_norm(&g, &b, Some((&mean, &var)), eps)?.0)
    }
}

/// Adds freshly initialised parameters to a store.
pub(crate) struct Init<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    fn weighted(&mut self, prefix: &str, shape: &[usize], fan_in: usize, bias_len: usize) -> Result<()> {
        let w = uniform_fan_in(shape, fan_in, self.rng);
        let b = uniform_fan_in(&[bias_len], fan_in, self.rng);
        self.store.insert(format!("{prefix}.weight"), w, true)?;
        self.store.insert(format!("{prefix}.bias"), b, true)?;
        Ok(())
    }

    pub fn conv1d(&mut self, prefix: &str, cout: usize, cin: usize, k: usize, groups: usize) -> Result<()> {
        self.weighted(prefix, &[cout, cin / groups, k], cin / groups * k, cout)
    }

    /// Weight layout `[C_in, C_out, k]`.
    pub fn conv1d_transposed(&mut self, prefix: &str, cin: usize, cout: usize, k: usize) -> Result<()> {
        self.weighted(prefix, &[cin, cout, k], cout * k, cout)
    }

    pub fn conv3d(&mut self, prefix: &str, cout: usize, cin: usize, k: usize) -> Result<()> {
        self.weighted(prefix, &[cout, cin, k, k, k], cin * k * k * k, cout)
    }

    /// Weight layout `[C_in, C_out, k, k, k]`.
    pub fn conv3d_transposed(&mut self, prefix: &str, cin: usize, cout: usize, k: usize) -> Result<()> {
        self.weighted(prefix, &[cin, cout, k, k, k], cout * k * k * k, cout)
    }

    pub fn linear(&mut self, prefix: &str, dout: usize, din: usize) -> Result<()> {
        self.weighted(prefix, &[dout, din], din, dout)
    }

    pub fn norm(&mut self, prefix: &str, dim: usize) -> Result<()> {
        self.store.insert(format!("{prefix}.gamma"), Tensor::ones(&[dim]), true)?;
        self.store.insert(format!("{prefix}.beta"), Tensor::zeros(&[dim]), true)?;
        Ok(())
    }

    /// GRN starts residual-neutral.
    pub fn grn(&mut self, prefix: &str, dim: usize) -> Result<()> {
        self.store.insert(format!("{prefix}.gamma"), Tensor::zeros(&[dim]), true)?;
        self.store.insert(format!("{prefix}.beta"), Tensor::zeros(&[dim]), true)?;
        Ok(())
    }

    pub fn batch_norm(&mut self, prefix: &str, dim: usize) -> Result<()> {
        self.norm(prefix, dim)?;
        self.store.insert(format!("{prefix}.running_mean"), Tensor::zeros(&[dim]), false)?;
        self.store.insert(format!("{prefix}.running_var"), Tensor::ones(&[dim]), false)?;
        Ok(())
    }
}
