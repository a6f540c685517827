use crate::error::{config, mismatch, Result};
use crate::graph::Var;
use crate::real::Real;
use crate::tensor::Tensor;

impl<'g, E: Real> Var<'g, E> {
    /// 2×2 mean pooling over the height and width of `x[C, T, H, W]`.
    pub fn avg_pool_hw(&self) -> Result<Var<'g, E>> {
        let x = self.value();
        if x.rank() != 4 {
            return Err(mismatch("avg_pool_hw", format!("input {:?}", x.shape())));
        }
        let (c, t, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        if h % 2 != 0 || w % 2 != 0 {
            return Err(config("avg_pool_hw", format!("odd spatial extent {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let quarter = E::from_f64(0.25);
        let xd = x.data();
        let mut out = vec![E::ZERO; c * t * oh * ow];
        for plane in 0..c * t {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for i in 0..oh {
                for j in 0..ow {
                    let a = src[(2 * i) * w + 2 * j] + src[(2 * i) * w + 2 * j + 1];
                    let b = src[(2 * i + 1) * w + 2 * j] + src[(2 * i + 1) * w + 2 * j + 1];
                    dst[i * ow + j] = (a + b) * quarter;
                }
            }
        }
        let out = Tensor::from_parts(vec![c, t, oh, ow], out);
        Ok(self.graph().record(out, &[self], move |g, _| {
            let mut gx = vec![E::ZERO; c * t * h * w];
            for plane in 0..c * t {
                let src = &g.data()[plane * oh * ow..(plane + 1) * oh * ow];
                let dst = &mut gx[plane * h * w..(plane + 1) * h * w];
                for i in 0..h {
                    for j in 0..w {
                        dst[i * w + j] = src[(i / 2) * ow + j / 2] * quarter;
                    }
                }
            }
            vec![Some(Tensor::from_parts(vec![c, t, h, w], gx))]
        }))
    }
}
