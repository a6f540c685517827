use crate::error::{mismatch, Result};
use crate::graph::Var;
use crate::real::Real;
use crate::tensor::Tensor;

/// `c[m,n] = a[m,k] · b[k,n]`
pub(crate) fn gemm_nn<E: Real>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut c = vec![E::ZERO; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == E::ZERO {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `c[m,n] = a[m,k] · b[n,k]ᵀ`
pub(crate) fn gemm_nt<E: Real>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut c = vec![E::ZERO; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = E::ZERO;
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            c[i * n + j] = acc;
        }
    }
    c
}

/// `c[m,n] = a[k,m]ᵀ · b[k,n]`
pub(crate) fn gemm_tn<E: Real>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut c = vec![E::ZERO; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == E::ZERO {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

impl<'g, E: Real> Var<'g, E> {
    /// Matrix product of two rank-2 values.
    pub fn matmul(&self, rhs: &Var<'g, E>) -> Result<Var<'g, E>> {
        let (a, b) = (self.value_rc(), rhs.value_rc());
        if a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0) {
            return Err(mismatch(
                "matmul",
                format!("{:?} x {:?}", a.shape(), b.shape()),
            ));
        }
        let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
        let out = Tensor::from_parts(vec![m, n], gemm_nn(a.data(), b.data(), m, k, n));
        Ok(self.graph().record(out, &[self, rhs], move |g, need| {
            vec![
                need[0].then(|| Tensor::from_parts(vec![m, k], gemm_nt(g.data(), b.data(), m, n, k))),
                need[1].then(|| Tensor::from_parts(vec![k, n], gemm_tn(a.data(), g.data(), k, m, n))),
            ]
        }))
    }

    pub fn transpose(&self) -> Result<Var<'g, E>> {
        if self.value().rank() != 2 {
            return Err(mismatch("transpose", format!("rank {}", self.value().rank())));
        }
        let out = self.value().transposed();
        Ok(self
            .graph()
            .record(out, &[self], |g, _| vec![Some(g.transposed())]))
    }

    /// Per-frame affine map: `x[D_in, N]`, `weight[D_out, D_in]`, `bias[D_out]`.
    pub fn linear(&self, weight: &Var<'g, E>, bias: Option<&Var<'g, E>>) -> Result<Var<'g, E>> {
        let (x, w) = (self.value(), weight.value());
        if x.rank() != 2 || w.rank() != 2 || w.dim(1) != x.dim(0) {
            return Err(mismatch(
                "linear",
                format!("weight {:?} applied to input {:?}", w.shape(), x.shape()),
            ));
        }
        let y = weight.matmul(self)?;
        match bias {
            Some(b) => y.add_channel_bias(b),
            None => Ok(y),
        }
    }
}
