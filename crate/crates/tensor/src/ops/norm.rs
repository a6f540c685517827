use crate::error::{mismatch, Result};
use crate::graph::Var;
use crate::real::Real;
use crate::tensor::Tensor;

fn affine_params<E: Real>(
    op: &'static str,
    channels: usize,
    gamma: &Var<'_, E>,
    beta: &Var<'_, E>,
) -> Result<()> {
    if gamma.shape() != [channels] || beta.shape() != [channels] {
        return Err(mismatch(
            op,
            format!(
                "gamma {:?} / beta {:?} for {channels} channels",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    Ok(())
}

/// Batch statistics of one channel-normalization pass, for running averages.
#[derive(Clone, Debug)]
pub struct BatchStats<E: Real> {
    pub mean: Tensor<E>,
    /// Unbiased variance.
    pub var: Tensor<E>,
}

impl<'g, E: Real> Var<'g, E> {
    /// Normalizes every frame (column) of `x[D, N]` over its `D` features.
    pub fn layer_norm(&self, gamma: &Var<'g, E>, beta: &Var<'g, E>, eps: f64) -> Result<Var<'g, E>> {
        let x = self.value_rc();
        if x.rank() != 2 {
            return Err(mismatch("layer_norm", format!("input {:?}", x.shape())));
        }
        let (d, n) = (x.dim(0), x.dim(1));
        affine_params("layer_norm", d, gamma, beta)?;
        let (gm, bt) = (gamma.value_rc(), beta.value_rc());

        let mut xhat = vec![E::ZERO; d * n];
        let mut inv_std = vec![0.0f64; n];
        for col in 0..n {
            let mean = (0..d).map(|r| x.data()[r * n + col].to_f64()).sum::<f64>() / d as f64;
            let var = (0..d)
                .map(|r| (x.data()[r * n + col].to_f64() - mean).powi(2))
                .sum::<f64>()
                / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[col] = is;
            for r in 0..d {
                xhat[r * n + col] = E::from_f64((x.data()[r * n + col].to_f64() - mean) * is);
            }
        }
        let out: Vec<E> = xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| gm.data()[i / n] * v + bt.data()[i / n])
            .collect();
        let out = Tensor::from_parts(vec![d, n], out);

        Ok(self.graph().record(out, &[self, gamma, beta], move |g, need| {
            let gd = g.data();
            let gx = need[0].then(|| {
                let mut gx = vec![E::ZERO; d * n];
                for col in 0..n {
                    let mut s1 = 0.0f64;
                    let mut s2 = 0.0f64;
                    for r in 0..d {
                        let gh = gd[r * n + col].to_f64() * gm.data()[r].to_f64();
                        s1 += gh;
                        s2 += gh * xhat[r * n + col].to_f64();
                    }
                    for r in 0..d {
                        let i = r * n + col;
                        let gh = gd[i].to_f64() * gm.data()[r].to_f64();
                        let v = inv_std[col] / d as f64 * (d as f64 * gh - s1 - xhat[i].to_f64() * s2);
                        gx[i] = E::from_f64(v);
                    }
                }
                Tensor::from_parts(vec![d, n], gx)
            });
            let ggamma = need[1].then(|| {
                let v = (0..d)
                    .map(|r| {
                        E::from_f64(
                            (0..n)
                                .map(|c| gd[r * n + c].to_f64() * xhat[r * n + c].to_f64())
                                .sum(),
                        )
                    })
                    .collect();
                Tensor::from_parts(vec![d], v)
            });
            let gbeta = need[2].then(|| {
                let v = gd
                    .chunks(n)
                    .map(|row| E::from_f64(row.iter().map(|v| v.to_f64()).sum()))
                    .collect();
                Tensor::from_parts(vec![d], v)
            });
            vec![gx, ggamma, gbeta]
        }))
    }

    /// Per-channel normalization of `x[C, ...]` over all trailing axes.
    ///
    /// With `running = None` batch statistics are used (training mode) and
    /// returned; otherwise the supplied `(mean, var)` are treated as constants.
    pub fn batch_norm(
        &self,
        gamma: &Var<'g, E>,
        beta: &Var<'g, E>,
        running: Option<(&Tensor<E>, &Tensor<E>)>,
        eps: f64,
    ) -> Result<(Var<'g, E>, Option<BatchStats<E>>)> {
        let x = self.value_rc();
        let c = x.dim(0);
        affine_params("batch_norm", c, gamma, beta)?;
        let inner = x.numel() / c;

        if let Some((mean, var)) = running {
            if mean.shape() != [c] || var.shape() != [c] {
                return Err(mismatch("batch_norm", "running statistics shape"));
            }
            // Frozen statistics reduce to a per-channel affine map.
            let g = self.graph();
            let scale = Tensor::from_fn(&[c], |i| E::ONE / (var.data()[i] + E::from_f64(eps)).sqrt());
            let shift = Tensor::from_fn(&[c], |i| -mean.data()[i] * scale.data()[i]);
            let normed = self
                .channel_scale(&g.constant(scale))?
                .add_channel_bias(&g.constant(shift))?;
            let out = normed.channel_scale(gamma)?.add_channel_bias(beta)?;
            return Ok((out, None));
        }

        let mut xhat = vec![E::ZERO; x.numel()];
        let mut inv_std = vec![0.0f64; c];
        let mut means = Vec::with_capacity(c);
        let mut vars = Vec::with_capacity(c);
        for ch in 0..c {
            let xs = &x.data()[ch * inner..(ch + 1) * inner];
            let mean = xs.iter().map(|v| v.to_f64()).sum::<f64>() / inner as f64;
            let ss = xs.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>();
            let var = ss / inner as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[ch] = is;
            for (o, v) in xhat[ch * inner..(ch + 1) * inner].iter_mut().zip(xs) {
                *o = E::from_f64((v.to_f64() - mean) * is);
            }
            means.push(E::from_f64(mean));
            vars.push(E::from_f64(if inner > 1 { ss / (inner - 1) as f64 } else { var }));
        }
        let (gm, bt) = (gamma.value_rc(), beta.value_rc());
        let out: Vec<E> = xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| gm.data()[i / inner] * v + bt.data()[i / inner])
            .collect();
        let shape = x.shape().to_vec();
        let out = Tensor::from_parts(shape.clone(), out);
        let stats = BatchStats {
            mean: Tensor::from_parts(vec![c], means),
            var: Tensor::from_parts(vec![c], vars),
        };

        let var = self.graph().record(out, &[self, gamma, beta], move |g, need| {
            let gd = g.data();
            let mut sums = vec![(0.0f64, 0.0f64); c];
            for (ch, s) in sums.iter_mut().enumerate() {
                for i in ch * inner..(ch + 1) * inner {
                    s.0 += gd[i].to_f64();
                    s.1 += gd[i].to_f64() * xhat[i].to_f64();
                }
            }
            let gx = need[0].then(|| {
                let m = inner as f64;
                let data = (0..gd.len())
                    .map(|i| {
                        let ch = i / inner;
                        let (sg, sgx) = sums[ch];
                        let gmv = gm.data()[ch].to_f64();
                        let v = gmv * inv_std[ch] / m
                            * (m * gd[i].to_f64() - sg - xhat[i].to_f64() * sgx);
                        E::from_f64(v)
                    })
                    .collect();
                Tensor::from_parts(shape.clone(), data)
            });
            let ggamma = need[1].then(|| Tensor::from_fn(&[c], |ch| E::from_f64(sums[ch].1)));
            let gbeta = need[2].then(|| Tensor::from_fn(&[c], |ch| E::from_f64(sums[ch].0)));
            vec![gx, ggamma, gbeta]
        });
        Ok((var, Some(stats)))
    }

    /// Multiplies every element of channel `c` (leading axis) by `scale[c]`.
    pub fn channel_scale(&self, scale: &Var<'g, E>) -> Result<Var<'g, E>> {
        let c = self.shape()[0];
        if scale.shape() != [c] {
            return Err(mismatch("channel_scale", format!("scale {:?} for {:?}", scale.shape(), self.shape())));
        }
        let (x, s) = (self.value_rc(), scale.value_rc());
        let inner = x.numel() / c;
        let out = Tensor::from_parts(
            x.shape().to_vec(),
            x.data().iter().enumerate().map(|(i, &v)| v * s.data()[i / inner]).collect(),
        );
        Ok(self.graph().record(out, &[self, scale], move |g, need| {
            vec![
                need[0].then(|| {
                    Tensor::from_parts(
                        g.shape().to_vec(),
                        g.data().iter().enumerate().map(|(i, &v)| v * s.data()[i / inner]).collect(),
                    )
                }),
                need[1].then(|| {
                    Tensor::from_fn(&[c], |ch| {
                        let r = ch * inner..(ch + 1) * inner;
                        E::from_f64(
                            g.data()[r.clone()]
                                .iter()
                                .zip(&x.data()[r])
                                .map(|(a, b)| a.to_f64() * b.to_f64())
                                .sum(),
                        )
                    })
                }),
            ]
        }))
    }

    /// Global response normalization over `x[D, N]`:
    /// `G_d = ‖x_d‖₂` across frames, `N_d = G_d / (mean(G) + eps)`,
    /// `y = gamma·(x∘N) + beta + x`.
    pub fn grn(&self, gamma: &Var<'g, E>, beta: &Var<'g, E>, eps: f64) -> Result<Var<'g, E>> {
        let x = self.value_rc();
        if x.rank() != 2 {
            return Err(mismatch("grn", format!("input {:?}", x.shape())));
        }
        let (d, n) = (x.dim(0), x.dim(1));
        affine_params("grn", d, gamma, beta)?;
        let (gm, bt) = (gamma.value_rc(), beta.value_rc());

        let norms: Vec<f64> = x.data().chunks(n).map(|row| row.iter().map(|v| v.to_f64().powi(2)).sum::<f64>().sqrt()).collect();
        let denom = norms.iter().sum::<f64>() / d as f64 + eps;
        let nrm: Vec<f64> = norms.iter().map(|g| g / denom).collect();
        let out = Tensor::from_parts(
            vec![d, n],
            x.data()
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let r = i / n;
                    gm.data()[r] * v * E::from_f64(nrm[r]) + bt.data()[r] + v
                })
                .collect(),
        );

        Ok(self.graph().record(out, &[self, gamma, beta], move |g, need| {
            let gd = g.data();
            // dL/dN_d = gamma_d · Σ_n g·x
            let gx_dot: Vec<f64> = (0..d)
                .map(|r| {
                    gd[r * n..(r + 1) * n]
                        .iter()
                        .zip(&x.data()[r * n..(r + 1) * n])
                        .map(|(a, b)| a.to_f64() * b.to_f64())
                        .sum()
                })
                .collect();
            let gx = need[0].then(|| {
                let g_n: Vec<f64> = (0..d).map(|r| gm.data()[r].to_f64() * gx_dot[r]).collect();
                let cross: f64 = (0..d).map(|r| g_n[r] * norms[r]).sum::<f64>() / (denom * denom * d as f64);
                let g_norm: Vec<f64> = (0..d).map(|r| g_n[r] / denom - cross).collect();
                let data = (0..d * n)
                    .map(|i| {
                        let r = i / n;
                        let direct = gd[i].to_f64() * (gm.data()[r].to_f64() * nrm[r] + 1.0);
                        let via_norm = if norms[r] > 0.0 {
                            g_norm[r] * x.data()[i].to_f64() / norms[r]
                        } else {
                            0.0
                        };
                        E::from_f64(direct + via_norm)
                    })
                    .collect();
                Tensor::from_parts(vec![d, n], data)
            });
            let ggamma = need[1].then(|| Tensor::from_fn(&[d], |r| E::from_f64(gx_dot[r] * nrm[r])));
            let gbeta = need[2].then(|| {
                Tensor::from_fn(&[d], |r| E::from_f64(gd[r * n..(r + 1) * n].iter().map(|v| v.to_f64()).sum()))
            });
            vec![gx, ggamma, gbeta]
        }))
    }
}
