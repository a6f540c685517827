//! Direct (non-FFT) convolutions.
//!
//! All convolutions run through one grouped kernel over three spatial axes;
//! 1D inputs `[C, N]` are viewed as `[C, 1, 1, N]`. The transposed
//! convolution is the adjoint of the forward kernel with the same weight
//! tensor, so its forward pass reuses the input-gradient kernel and its
//! input gradient reuses the forward kernel.

use crate::error::{config, mismatch, Result};
use crate::graph::Var;
use crate::ops::linalg::{gemm_nn, gemm_nt, gemm_tn};
use crate::real::Real;
use crate::tensor::Tensor;

/// Output extent of a strided convolution, `None` when the kernel does not fit.
pub fn conv_output_len(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || input + 2 * padding < kernel {
        return None;
    }
    Some((input + 2 * padding - kernel) / stride + 1)
}

/// Output extent of a transposed convolution, `None` for an empty result.
pub fn transposed_output_len(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Option<usize> {
    let full = (input - 1) * stride + kernel + output_padding;
    (stride > 0 && kernel > 0 && full > 2 * padding).then(|| full - 2 * padding)
}

/// Stride, padding and grouping of a convolution over `[T, H, W]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dGeometry {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub output_padding: [usize; 3],
    pub groups: usize,
}

impl Conv3dGeometry {
    pub fn new(stride: [usize; 3], padding: [usize; 3]) -> Self {
        Self {
            stride,
            padding,
            output_padding: [0; 3],
            groups: 1,
        }
    }

    pub fn with_output_padding(mut self, output_padding: [usize; 3]) -> Self {
        self.output_padding = output_padding;
        self
    }
}

#[derive(Clone, Copy, Debug)]
struct Dims {
    /// Channels of the "input" side of the forward convolution.
    cin: usize,
    cout: usize,
    groups: usize,
    input: [usize; 3],
    output: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    padding: [usize; 3],
}

impl Dims {
    fn in_size(&self) -> usize {
        self.input.iter().product()
    }
    fn out_size(&self) -> usize {
        self.output.iter().product()
    }
    fn k_size(&self) -> usize {
        self.kernel.iter().product()
    }
}

/// Output positions `lo..hi` along one axis whose input tap `o*s + k - p` is in range.
#[inline]
fn tap_range(out_len: usize, in_len: usize, stride: usize, pad: usize, k: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let top = in_len + pad;
    if top <= k {
        return (0, 0);
    }
    let hi = ((top - 1 - k) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

/// Visits every (output offset, input offset, weight index) row pairing and
/// hands the innermost axis to `f` as `(out_row_start, in_row_start, lo, hi, k2)`.
#[inline]
fn for_each_row(
    d: &Dims,
    mut f: impl FnMut(usize, usize, usize, usize, usize, usize),
) {
    let [o0, o1, o2] = d.output;
    let [i0, i1, i2] = d.input;
    let [k0n, k1n, k2n] = d.kernel;
    let [s0, s1, s2] = d.stride;
    let [p0, p1, p2] = d.padding;
    for k0 in 0..k0n {
        let (lo0, hi0) = tap_range(o0, i0, s0, p0, k0);
        for k1 in 0..k1n {
            let (lo1, hi1) = tap_range(o1, i1, s1, p1, k1);
            for k2 in 0..k2n {
                let (lo2, hi2) = tap_range(o2, i2, s2, p2, k2);
                if lo2 >= hi2 {
                    continue;
                }
                let kidx = (k0 * k1n + k1) * k2n + k2;
                for a in lo0..hi0 {
                    let ia = a * s0 + k0 - p0;
                    for b in lo1..hi1 {
                        let ib = b * s1 + k1 - p1;
                        f((a * o1 + b) * o2, (ia * i1 + ib) * i2, lo2, hi2, kidx, k2);
                    }
                }
            }
        }
    }
}

/// Largest unfolded input (elements) for which the GEMM path is used.
const COLUMN_BUDGET: usize = 1 << 24;

/// Ungrouped convolutions with a small enough unfolded input go through
/// im2col and matrix products; others use the direct row kernels.
fn use_gemm(d: &Dims) -> bool {
    d.groups == 1 && d.cin * d.k_size() * d.out_size() <= COLUMN_BUDGET
}

/// Unfolds `x[C_in, ...]` into `[C_in·k_size, out_size]`.
fn im2col<E: Real>(x: &[E], d: &Dims) -> Vec<E> {
    let (in_sz, out_sz, ksz) = (d.in_size(), d.out_size(), d.k_size());
    let (s2, p2) = (d.stride[2], d.padding[2]);
    let mut col = vec![E::ZERO; d.cin * ksz * out_sz];
    for ci in 0..d.cin {
        let xc = &x[ci * in_sz..(ci + 1) * in_sz];
        let cc = &mut col[ci * ksz * out_sz..(ci + 1) * ksz * out_sz];
        for_each_row(d, |orow, irow, lo, hi, kidx, k2| {
            let start = irow + lo * s2 + k2 - p2;
            let dst = &mut cc[kidx * out_sz + orow + lo..kidx * out_sz + orow + hi];
            if s2 == 1 {
                dst.copy_from_slice(&xc[start..start + (hi - lo)]);
            } else {
                for (j, v) in dst.iter_mut().enumerate() {
                    *v = xc[start + j * s2];
                }
            }
        });
    }
    col
}

/// Adjoint of [`im2col`]: scatters `[C_in·k_size, out_size]` back onto the input.
fn col2im<E: Real>(col: &[E], d: &Dims) -> Vec<E> {
    let (in_sz, out_sz, ksz) = (d.in_size(), d.out_size(), d.k_size());
    let (s2, p2) = (d.stride[2], d.padding[2]);
    let mut x = vec![E::ZERO; d.cin * in_sz];
    for ci in 0..d.cin {
        let xc = &mut x[ci * in_sz..(ci + 1) * in_sz];
        let cc = &col[ci * ksz * out_sz..(ci + 1) * ksz * out_sz];
        for_each_row(d, |orow, irow, lo, hi, kidx, k2| {
            let start = irow + lo * s2 + k2 - p2;
            let src = &cc[kidx * out_sz + orow + lo..kidx * out_sz + orow + hi];
            if s2 == 1 {
                for (x, &v) in xc[start..start + (hi - lo)].iter_mut().zip(src) {
                    *x += v;
                }
            } else {
                for (j, &v) in src.iter().enumerate() {
                    xc[start + j * s2] += v;
                }
            }
        });
    }
    x
}

fn forward<E: Real>(x: &[E], w: &[E], d: &Dims) -> Vec<E> {
    if use_gemm(d) {
        return gemm_nn(w, &im2col(x, d), d.cout, d.cin * d.k_size(), d.out_size());
    }
    forward_direct(x, w, d)
}

fn backward_input<E: Real>(gy: &[E], w: &[E], d: &Dims) -> Vec<E> {
    if use_gemm(d) {
        let k = d.cin * d.k_size();
        return col2im(&gemm_tn(w, gy, k, d.cout, d.out_size()), d);
    }
    backward_input_direct(gy, w, d)
}

fn backward_weight<E: Real>(x: &[E], gy: &[E], d: &Dims) -> Vec<E> {
    if use_gemm(d) {
        return gemm_nt(gy, &im2col(x, d), d.cout, d.out_size(), d.cin * d.k_size());
    }
    backward_weight_direct(x, gy, d)
}

fn forward_direct<E: Real>(x: &[E], w: &[E], d: &Dims) -> Vec<E> {
    let (in_sz, out_sz, ksz) = (d.in_size(), d.out_size(), d.k_size());
    let (cin_g, cout_g) = (d.cin / d.groups, d.cout / d.groups);
    let (s2, p2) = (d.stride[2], d.padding[2]);
    let mut y = vec![E::ZERO; d.cout * out_sz];
    for co in 0..d.cout {
        let grp = co / cout_g;
        let yc = &mut y[co * out_sz..(co + 1) * out_sz];
        for cil in 0..cin_g {
            let ci = grp * cin_g + cil;
            let xc = &x[ci * in_sz..(ci + 1) * in_sz];
            let wk = &w[(co * cin_g + cil) * ksz..(co * cin_g + cil + 1) * ksz];
            for_each_row(d, |orow, irow, lo, hi, kidx, k2| {
                let wv = wk[kidx];
                if wv == E::ZERO {
                    return;
                }
                let start = irow + lo * s2 + k2 - p2;
                let yr = &mut yc[orow + lo..orow + hi];
                if s2 == 1 {
                    for (yv, &xv) in yr.iter_mut().zip(&xc[start..start + (hi - lo)]) {
                        *yv += wv * xv;
                    }
                } else {
                    for (j, yv) in yr.iter_mut().enumerate() {
                        *yv += wv * xc[start + j * s2];
                    }
                }
            });
        }
    }
    y
}

fn backward_input_direct<E: Real>(gy: &[E], w: &[E], d: &Dims) -> Vec<E> {
    let (in_sz, out_sz, ksz) = (d.in_size(), d.out_size(), d.k_size());
    let (cin_g, cout_g) = (d.cin / d.groups, d.cout / d.groups);
    let (s2, p2) = (d.stride[2], d.padding[2]);
    let mut gx = vec![E::ZERO; d.cin * in_sz];
    for co in 0..d.cout {
        let grp = co / cout_g;
        let gyc = &gy[co * out_sz..(co + 1) * out_sz];
        for cil in 0..cin_g {
            let ci = grp * cin_g + cil;
            let gxc = &mut gx[ci * in_sz..(ci + 1) * in_sz];
            let wk = &w[(co * cin_g + cil) * ksz..(co * cin_g + cil + 1) * ksz];
            for_each_row(d, |orow, irow, lo, hi, kidx, k2| {
                let wv = wk[kidx];
                if wv == E::ZERO {
                    return;
                }
                let start = irow + lo * s2 + k2 - p2;
                let gr = &gyc[orow + lo..orow + hi];
                if s2 == 1 {
                    for (xv, &g) in gxc[start..start + (hi - lo)].iter_mut().zip(gr) {
                        *xv += wv * g;
                    }
                } else {
                    for (j, &g) in gr.iter().enumerate() {
                        gxc[start + j * s2] += wv * g;
                    }
                }
            });
        }
    }
    gx
}

fn backward_weight_direct<E: Real>(x: &[E], gy: &[E], d: &Dims) -> Vec<E> {
    let (in_sz, out_sz, ksz) = (d.in_size(), d.out_size(), d.k_size());
    let (cin_g, cout_g) = (d.cin / d.groups, d.cout / d.groups);
    let (s2, p2) = (d.stride[2], d.padding[2]);
    let mut gw = vec![E::ZERO; d.cout * cin_g * ksz];
    for co in 0..d.cout {
        let grp = co / cout_g;
        let gyc = &gy[co * out_sz..(co + 1) * out_sz];
        for cil in 0..cin_g {
            let ci = grp * cin_g + cil;
            let xc = &x[ci * in_sz..(ci + 1) * in_sz];
            let gk = &mut gw[(co * cin_g + cil) * ksz..(co * cin_g + cil + 1) * ksz];
            for_each_row(d, |orow, irow, lo, hi, kidx, k2| {
                let start = irow + lo * s2 + k2 - p2;
                let gr = &gyc[orow + lo..orow + hi];
                let mut acc = E::ZERO;
                if s2 == 1 {
                    for (&g, &xv) in gr.iter().zip(&xc[start..start + (hi - lo)]) {
                        acc += g * xv;
                    }
                } else {
                    for (j, &g) in gr.iter().enumerate() {
                        acc += g * xc[start + j * s2];
                    }
                }
                gk[kidx] += acc;
            });
        }
    }
    gw
}

fn bias_vector<E: Real>(bias: Option<&Var<'_, E>>, channels: usize, op: &'static str) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [channels] {
            return Err(mismatch(op, format!("bias {:?} for {channels} output channels", b.shape())));
        }
    }
    Ok(())
}

impl<'g, E: Real> Var<'g, E> {
    fn conv_core(
        &self,
        weight: &Var<'g, E>,
        bias: Option<&Var<'g, E>>,
        dims: Dims,
        out_shape: Vec<usize>,
    ) -> Result<Var<'g, E>> {
        let (x, w) = (self.value_rc(), weight.value_rc());
        let y = Tensor::from_parts(out_shape, forward(x.data(), w.data(), &dims));
        let w_shape = w.shape().to_vec();
        let x_shape = x.shape().to_vec();
        let out = self.graph().record(y, &[self, weight], move |g, need| {
            vec![
                need[0].then(|| {
                    Tensor::from_parts(x_shape.clone(), backward_input(g.data(), w.data(), &dims))
                }),
                need[1].then(|| {
                    Tensor::from_parts(w_shape.clone(), backward_weight(x.data(), g.data(), &dims))
                }),
            ]
        });
        match bias {
            Some(b) => out.add_channel_bias(b),
            None => Ok(out),
        }
    }

    fn conv_transposed_core(
        &self,
        weight: &Var<'g, E>,
        bias: Option<&Var<'g, E>>,
        dims: Dims,
        out_shape: Vec<usize>,
    ) -> Result<Var<'g, E>> {
        // `dims` describes the forward convolution this op is the adjoint of:
        // its "output" is our input, its "input" is our output.
        let (x, w) = (self.value_rc(), weight.value_rc());
        let y = Tensor::from_parts(out_shape, backward_input(x.data(), w.data(), &dims));
        let w_shape = w.shape().to_vec();
        let x_shape = x.shape().to_vec();
        let out = self.graph().record(y, &[self, weight], move |g, need| {
            vec![
                need[0].then(|| Tensor::from_parts(x_shape.clone(), forward(g.data(), w.data(), &dims))),
                need[1].then(|| {
                    Tensor::from_parts(w_shape.clone(), backward_weight(g.data(), x.data(), &dims))
                }),
            ]
        });
        match bias {
            Some(b) => out.add_channel_bias(b),
            None => Ok(out),
        }
    }

    /// 1D convolution: `x[C_in, N]`, `weight[C_out, C_in/groups, k]`.
    pub fn conv1d(
        &self,
        weight: &Var<'g, E>,
        bias: Option<&Var<'g, E>>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var<'g, E>> {
        const OP: &str = "conv1d";
        let (x, w) = (self.value(), weight.value());
        if x.rank() != 2 || w.rank() != 3 {
            return Err(mismatch(OP, format!("input {:?}, weight {:?}", x.shape(), w.shape())));
        }
        let (cin, n) = (x.dim(0), x.dim(1));
        let (cout, cin_g, k) = (w.dim(0), w.dim(1), w.dim(2));
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cin_g * groups != cin {
            return Err(config(
                OP,
                format!("{cin} input / {cout} output channels with {groups} groups and weight {:?}", w.shape()),
            ));
        }
        let out_len = conv_output_len(n, k, stride, padding)
            .ok_or_else(|| config(OP, format!("kernel {k}, stride {stride}, padding {padding} on length {n}")))?;
        bias_vector(bias, cout, OP)?;
        let dims = Dims {
            cin,
            cout,
            groups,
            input: [1, 1, n],
            output: [1, 1, out_len],
            kernel: [1, 1, k],
            stride: [1, 1, stride],
            padding: [0, 0, padding],
        };
        self.conv_core(weight, bias, dims, vec![cout, out_len])
    }

    /// Adjoint of [`Var::conv1d`] sharing its weight layout:
    /// `x[C_in, N]`, `weight[C_in, C_out, k]`, output length
    /// `(N-1)·stride - 2·padding + k + output_padding`.
    pub fn conv1d_transposed(
        &self,
        weight: &Var<'g, E>,
        bias: Option<&Var<'g, E>>,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var<'g, E>> {
        const OP: &str = "conv1d_transposed";
        let (x, w) = (self.value(), weight.value());
        if x.rank() != 2 || w.rank() != 3 || w.dim(0) != x.dim(0) {
            return Err(mismatch(OP, format!("input {:?}, weight {:?}", x.shape(), w.shape())));
        }
        let (cin, n) = (x.dim(0), x.dim(1));
        let (cout, k) = (w.dim(1), w.dim(2));
        if stride == 0 || output_padding >= stride {
            return Err(config(OP, format!("output padding {output_padding} with stride {stride}")));
        }
        let out_len = transposed_output_len(n, k, stride, padding, output_padding)
            .ok_or_else(|| config(OP, format!("kernel {k}, stride {stride}, padding {padding} on length {n}")))?;
        if conv_output_len(out_len, k, stride, padding) != Some(n) {
            return Err(config(OP, format!("kernel {k} incompatible with stride {stride} and padding {padding}")));
        }
        bias_vector(bias, cout, OP)?;
        let dims = Dims {
            cin: cout,
            cout: cin,
            groups: 1,
            input: [1, 1, out_len],
            output: [1, 1, n],
            kernel: [1, 1, k],
            stride: [1, 1, stride],
            padding: [0, 0, padding],
        };
        self.conv_transposed_core(weight, bias, dims, vec![cout, out_len])
    }

    /// 3D convolution: `x[C_in, T, H, W]`, `weight[C_out, C_in/groups, kT, kH, kW]`.
    pub fn conv3d(
        &self,
        weight: &Var<'g, E>,
        bias: Option<&Var<'g, E>>,
        geometry: Conv3dGeometry,
    ) -> Result<Var<'g, E>> {
        const OP: &str = "conv3d";
        let (x, w) = (self.value(), weight.value());
        if x.rank() != 4 || w.rank() != 5 {
            return Err(mismatch(OP, format!("input {:?}, weight {:?}", x.shape(), w.shape())));
        }
        let groups = geometry.groups;
        let cin = x.dim(0);
        let (cout, cin_g) = (w.dim(0), w.dim(1));
        if groups == 0 || cout % groups != 0 || cin_g * groups != cin {
            return Err(config(
                OP,
                format!("{cin} input / {cout} output channels with {groups} groups and weight {:?}", w.shape()),
            ));
        }
        let kernel = [w.dim(2), w.dim(3), w.dim(4)];
        let input = [x.dim(1), x.dim(2), x.dim(3)];
        let mut output = [0; 3];
        for a in 0..3 {
            output[a] = conv_output_len(input[a], kernel[a], geometry.stride[a], geometry.padding[a])
                .ok_or_else(|| config(OP, format!("axis {a}: kernel {kernel:?} on input {input:?}")))?;
        }
        bias_vector(bias, cout, OP)?;
        let dims = Dims {
            cin,
            cout,
            groups,
            input,
            output,
            kernel,
            stride: geometry.stride,
            padding: geometry.padding,
        };
        self.conv_core(weight, bias, dims, vec![cout, output[0], output[1], output[2]])
    }

    /// Adjoint of [`Var::conv3d`]: `x[C_in, T, H, W]`, `weight[C_in, C_out, kT, kH, kW]`.
    pub fn conv3d_transposed(
        &self,
        weight: &Var<'g, E>,
        bias: Option<&Var<'g, E>>,
        geometry: Conv3dGeometry,
    ) -> Result<Var<'g, E>> {
        const OP: &str = "conv3d_transposed";
        let (x, w) = (self.value(), weight.value());
        if x.rank() != 4 || w.rank() != 5 || w.dim(0) != x.dim(0) {
            return Err(mismatch(OP, format!("input {:?}, weight {:?}", x.shape(), w.shape())));
        }
        if geometry.groups != 1 {
            return Err(config(OP, "grouped transposed convolution is not supported"));
        }
        let (cin, cout) = (x.dim(0), w.dim(1));
        let kernel = [w.dim(2), w.dim(3), w.dim(4)];
        let input = [x.dim(1), x.dim(2), x.dim(3)];
        let mut output = [0; 3];
        for a in 0..3 {
            let (s, p, op) = (geometry.stride[a], geometry.padding[a], geometry.output_padding[a]);
            if s == 0 || op >= s {
                return Err(config(OP, format!("axis {a}: output padding {op} with stride {s}")));
            }
            output[a] = transposed_output_len(input[a], kernel[a], s, p, op)
                .filter(|&len| conv_output_len(len, kernel[a], s, p) == Some(input[a]))
                .ok_or_else(|| config(OP, format!("axis {a}: kernel {kernel:?}, stride {s}, padding {p}")))?;
        }
        bias_vector(bias, cout, OP)?;
        let dims = Dims {
            cin: cout,
            cout: cin,
            groups: 1,
            input: output,
            output: input,
            kernel,
            stride: geometry.stride,
            padding: geometry.padding,
        };
        self.conv_transposed_core(weight, bias, dims, vec![cout, output[0], output[1], output[2]])
    }
}
