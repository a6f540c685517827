//! Differentiable operations on [`Var`].
//!
//! Reductions accumulate in `f64` regardless of the element type.

mod activation;
mod conv;
mod linalg;
mod norm;
mod pool;

pub use activation::{normal_cdf, sigmoid_scalar, softplus_scalar};
pub use conv::{conv_output_len, transposed_output_len, Conv3dGeometry};
pub use norm::BatchStats;

use crate::error::{mismatch, Result};
use crate::graph::Var;
use crate::real::Real;
use crate::tensor::Tensor;

fn same_shape(op: &'static str, a: &Tensor<impl Real>, b: &Tensor<impl Real>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(mismatch(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl<'g, E: Real> Var<'g, E> {
    /// Elementwise map with derivative `deriv(x, y)` evaluated on input and output.
    pub(crate) fn unary(
        &self,
        f: impl Fn(E) -> E,
        deriv: impl Fn(E, E) -> E + 'static,
    ) -> Var<'g, E> {
        let x = self.value_rc();
        let out = x.map(f);
        let y = std::rc::Rc::new(out.clone());
        self.graph().record(out, &[self], move |g, _| {
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .zip(y.data())
                .map(|((&g, &x), &y)| g * deriv(x, y))
                .collect();
            vec![Some(Tensor::from_parts(g.shape().to_vec(), data))]
        })
    }

    pub fn add(&self, other: &Var<'g, E>) -> Result<Var<'g, E>> {
        same_shape("add", self.value(), other.value())?;
        let out = self.value().zip_map(other.value(), |a, b| a + b)?;
        Ok(self
            .graph()
            .record(out, &[self, other], |g, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&self, other: &Var<'g, E>) -> Result<Var<'g, E>> {
        same_shape("sub", self.value(), other.value())?;
        let out = self.value().zip_map(other.value(), |a, b| a - b)?;
        Ok(self.graph().record(out, &[self, other], |g, _| {
            vec![Some(g.clone()), Some(g.map(|v| -v))]
        }))
    }

    pub fn mul(&self, other: &Var<'g, E>) -> Result<Var<'g, E>> {
        same_shape("mul", self.value(), other.value())?;
        let (a, b) = (self.value_rc(), other.value_rc());
        let out = a.zip_map(&b, |x, y| x * y)?;
        Ok(self.graph().record(out, &[self, other], move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&b, |g, y| g * y).unwrap()),
                need[1].then(|| g.zip_map(&a, |g, x| g * x).unwrap()),
            ]
        }))
    }

    pub fn div(&self, other: &Var<'g, E>) -> Result<Var<'g, E>> {
        same_shape("div", self.value(), other.value())?;
        let (a, b) = (self.value_rc(), other.value_rc());
        let out = a.zip_map(&b, |x, y| x / y)?;
        Ok(self.graph().record(out, &[self, other], move |g, need| {
            let gb = need[1].then(|| {
                let data = g
                    .data()
                    .iter()
                    .zip(a.data())
                    .zip(b.data())
                    .map(|((&g, &x), &y)| -g * x / (y * y))
                    .collect();
                Tensor::from_parts(g.shape().to_vec(), data)
            });
            vec![need[0].then(|| g.zip_map(&b, |g, y| g / y).unwrap()), gb]
        }))
    }

    pub fn neg(&self) -> Var<'g, E> {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Var<'g, E> {
        let c = E::from_f64(c);
        let out = self.value().map(|v| v * c);
        self.graph()
            .record(out, &[self], move |g, _| vec![Some(g.map(|v| v * c))])
    }

    pub fn add_scalar(&self, c: f64) -> Var<'g, E> {
        let c = E::from_f64(c);
        let out = self.value().map(|v| v + c);
        self.graph().record(out, &[self], |g, _| vec![Some(g.clone())])
    }

    pub fn square(&self) -> Var<'g, E> {
        let two = E::from_f64(2.0);
        self.unary(|x| x * x, move |x, _| two * x)
    }

    pub fn exp(&self) -> Var<'g, E> {
        self.unary(Real::exp, |_, y| y)
    }

    pub fn ln(&self) -> Var<'g, E> {
        self.unary(Real::ln, |x, _| E::ONE / x)
    }

    /// `max(x, floor)`; gradient is zero where the floor is active.
    pub fn clamp_min(&self, floor: f64) -> Var<'g, E> {
        let floor = E::from_f64(floor);
        self.unary(
            move |x| x.max(floor),
            move |x, _| if x > floor { E::ONE } else { E::ZERO },
        )
    }

    pub fn sum(&self) -> Var<'g, E> {
        let shape = self.shape().to_vec();
        let out = Tensor::scalar(E::from_f64(self.value().sum_f64()));
        self.graph()
            .record(out, &[self], move |g, _| vec![Some(Tensor::full(&shape, g.item()))])
    }

    pub fn mean(&self) -> Var<'g, E> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Inner product of two equally shaped tensors (`tr(AᵀB)` for matrices).
    pub fn dot(&self, other: &Var<'g, E>) -> Result<Var<'g, E>> {
        same_shape("dot", self.value(), other.value())?;
        let (a, b) = (self.value_rc(), other.value_rc());
        let s: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| x.to_f64() * y.to_f64())
            .sum();
        Ok(self
            .graph()
            .record(Tensor::scalar(E::from_f64(s)), &[self, other], move |g, need| {
                let g = g.item();
                vec![
                    need[0].then(|| b.map(|v| v * g)),
                    need[1].then(|| a.map(|v| v * g)),
                ]
            }))
    }

    /// Frobenius norm; the gradient at the origin is taken as zero.
    pub fn frobenius_norm(&self) -> Var<'g, E> {
        let x = self.value_rc();
        let norm = x.sum_sq_f64().sqrt();
        self.graph()
            .record(Tensor::scalar(E::from_f64(norm)), &[self], move |g, _| {
                if norm == 0.0 {
                    return vec![Some(Tensor::zeros(x.shape()))];
                }
                let k = E::from_f64(g.item().to_f64() / norm);
                vec![Some(x.map(|v| v * k))]
            })
    }

    /// Mean squared difference.
    pub fn mse(&self, target: &Var<'g, E>) -> Result<Var<'g, E>> {
        same_shape("mse", self.value(), target.value())?;
        let (a, b) = (self.value_rc(), target.value_rc());
        let n = a.numel() as f64;
        let s: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x.to_f64() - y.to_f64()).powi(2))
            .sum();
        Ok(self.graph().record(
            Tensor::scalar(E::from_f64(s / n)),
            &[self, target],
            move |g, need| {
                let k = E::from_f64(2.0 * g.item().to_f64() / n);
                let diff = a.zip_map(&b, |x, y| (x - y) * k).unwrap();
                vec![need[0].then(|| diff.clone()), need[1].then(|| diff.map(|v| -v))]
            },
        ))
    }

    /// Mean absolute difference; subgradient 0 where the inputs coincide.
    pub fn mae(&self, target: &Var<'g, E>) -> Result<Var<'g, E>> {
        same_shape("mae", self.value(), target.value())?;
        let (a, b) = (self.value_rc(), target.value_rc());
        let n = a.numel() as f64;
        let s: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x.to_f64() - y.to_f64()).abs())
            .sum();
        Ok(self.graph().record(
            Tensor::scalar(E::from_f64(s / n)),
            &[self, target],
            move |g, need| {
                let k = E::from_f64(g.item().to_f64() / n);
                let sign = a
                    .zip_map(&b, |x, y| {
                        if x > y {
                            k
                        } else if x < y {
                            -k
                        } else {
                            E::ZERO
                        }
                    })
                    .unwrap();
                vec![need[0].then(|| sign.clone()), need[1].then(|| sign.map(|v| -v))]
            },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g, E>> {
        let old = self.shape().to_vec();
        let out = (*self.value_rc()).clone().reshape(shape)?;
        Ok(self.graph().record(out, &[self], move |g, _| {
            vec![Some(g.clone().reshape(&old).expect("reshape back"))]
        }))
    }

    /// Concatenation along the leading axis.
    pub fn concat(parts: &[&Var<'g, E>]) -> Result<Var<'g, E>> {
        let first = parts
            .first()
            .ok_or_else(|| mismatch("concat", "no inputs"))?;
        let tail = &first.shape()[1..];
        for p in parts {
            if &p.shape()[1..] != tail {
                return Err(mismatch(
                    "concat",
                    format!("{:?} vs {:?}", first.shape(), p.shape()),
                ));
            }
        }
        let inner: usize = tail.iter().product();
        let lead: Vec<usize> = parts.iter().map(|p| p.shape()[0]).collect();
        let mut shape = vec![lead.iter().sum()];
        shape.extend_from_slice(tail);
        let mut data = Vec::with_capacity(shape.iter().product());
        for p in parts {
            data.extend_from_slice(p.value().data());
        }
        let out = Tensor::from_parts(shape, data);
        Ok(first.graph().record(out, parts, move |g, need| {
            let mut offset = 0;
            lead.iter()
                .zip(need)
                .map(|(&rows, &needed)| {
                    let len = rows * inner;
                    let piece = needed.then(|| {
                        let mut s = vec![rows];
                        s.extend_from_slice(&g.shape()[1..]);
                        Tensor::from_parts(s, g.data()[offset..offset + len].to_vec())
                    });
                    offset += len;
                    piece
                })
                .collect()
        }))
    }

    /// Rows `start..start+len` of the leading axis.
    pub fn narrow(&self, start: usize, len: usize) -> Result<Var<'g, E>> {
        let shape = self.shape().to_vec();
        if len == 0 || start + len > shape[0] {
            return Err(mismatch(
                "narrow",
                format!("rows {start}..{} of {:?}", start + len, shape),
            ));
        }
        let inner: usize = shape[1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[0] = len;
        let data = self.value().data()[start * inner..(start + len) * inner].to_vec();
        let out = Tensor::from_parts(out_shape, data);
        Ok(self.graph().record(out, &[self], move |g, _| {
            let mut full = Tensor::zeros(&shape);
            full.data_mut()[start * inner..(start + len) * inner].copy_from_slice(g.data());
            vec![Some(full)]
        }))
    }

    /// Adds `bias[c]` to every element of channel `c` (leading axis).
    pub fn add_channel_bias(&self, bias: &Var<'g, E>) -> Result<Var<'g, E>> {
        let c = self.shape()[0];
        if bias.shape() != [c] {
            return Err(mismatch(
                "add_channel_bias",
                format!("bias {:?} for input {:?}", bias.shape(), self.shape()),
            ));
        }
        let inner = self.value().numel() / c;
        let mut out = (*self.value_rc()).clone();
        for (ch, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let b = bias.value().data()[ch];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        Ok(self.graph().record(out, &[self, bias], move |g, need| {
            let gb = need[1].then(|| {
                let sums = g
                    .data()
                    .chunks(inner)
                    .map(|ch| E::from_f64(ch.iter().map(|v| v.to_f64()).sum()))
                    .collect();
                Tensor::from_parts(vec![c], sums)
            });
            vec![Some(g.clone()), gb]
        }))
    }
}
