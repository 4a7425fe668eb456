//! Dense NCHW tensors and the handful of kernels the rest of the crate is
//! built on.
//!
//! Layout is always batch-channel-height-width, row-major. Tensors are
//! immutable values: every op returns a fresh tensor.

use std::fmt;
use std::ops::AddAssign;

use crate::error::{Error, Result};
use crate::quant::Precision;

/// Default negative slope for leaky ReLU. A power of two, so the integer
/// path can apply it exactly as a shift folded into the requant multiplier.
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.125;

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() {
            return Err(Error::shape("shape", "rank 0 tensors are not supported"));
        }
        if dims.contains(&0) {
            return Err(Error::shape("shape", format!("zero-sized dim in {dims:?}")));
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::shape("shape", format!("element count of {dims:?} overflows")))?;
        Ok(Shape(dims))
    }

    pub fn nchw(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        Self::new(vec![n, c, h, w])
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// The four NCHW extents; fails for other ranks.
    pub fn as_nchw(&self) -> Result<(usize, usize, usize, usize)> {
        match self.0[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape("shape", format!("expected rank 4, got {:?}", self.0))),
        }
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dims: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        write!(f, "[{}]", dims.join("x"))
    }
}

/// Dense floating tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::shape(
                "tensor",
                format!("{} values for shape {:?}", data.len(), shape),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::new(Shape::new(dims.to_vec())?, data)
    }

    pub fn zeros(shape: Shape) -> Self {
        let n = shape.numel();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        let n = shape.numel();
        Tensor { shape, data: vec![value; n] }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize) -> f64) -> Self {
        let data = (0..shape.numel()).map(&mut f).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "zip_map",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn reshape(self, dims: &[usize]) -> Result<Tensor> {
        Tensor::new(Shape::new(dims.to_vec())?, self.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn mean_abs(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum::<f64>() / self.data.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Integer tensor carrying its per-tensor quantization parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct QTensor {
    shape: Shape,
    data: Vec<i32>,
    step: f64,
    zero_point: i32,
    precision: Precision,
}

impl QTensor {
    pub fn new(
        shape: Shape,
        data: Vec<i32>,
        step: f64,
        zero_point: i32,
        precision: Precision,
    ) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::shape(
                "qtensor",
                format!("{} values for shape {:?}", data.len(), shape),
            ));
        }
        if !(step > 0.0) || !step.is_finite() {
            return Err(Error::InvalidStep(step));
        }
        let (lo, hi) = precision.range()?;
        if let Some(&v) = data.iter().find(|&&v| v < lo || v > hi) {
            return Err(Error::OutOfRange {
                value: v as i64,
                min: lo as i64,
                max: hi as i64,
            });
        }
        Ok(QTensor {
            shape,
            data,
            step,
            zero_point,
            precision,
        })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn zero_point(&self) -> i32 {
        self.zero_point
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Back to floating values, `(q + z) * s`.
    pub fn to_float(&self) -> Tensor {
        let s = self.step;
        let z = self.zero_point;
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&q| (q + z) as f64 * s).collect(),
        }
    }
}

/// Stride, padding and group count of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvParams {
    pub fn new(stride: usize, pad: usize, groups: usize) -> Self {
        ConvParams { stride, pad, groups }
    }
}

pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Geometry shared by the forward and backward kernels.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub p: ConvParams,
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], p: ConvParams) -> Result<Self> {
        let layer = "conv2d";
        let (n, c_in, h, w) = match *input {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(Error::shape(layer, format!("input rank {}", input.len()))),
        };
        let (c_out, cig, kh, kw) = match *weight {
            [a, b, c, d] => (a, b, c, d),
            _ => return Err(Error::shape(layer, format!("weight rank {}", weight.len()))),
        };
        if p.stride == 0 {
            return Err(Error::shape(layer, "stride must be >= 1"));
        }
        if p.groups == 0 || c_in % p.groups != 0 || c_out % p.groups != 0 {
            return Err(Error::shape(
                layer,
                format!("channels in={c_in} out={c_out} not divisible by groups={}", p.groups),
            ));
        }
        if cig != c_in / p.groups {
            return Err(Error::shape(
                layer,
                format!("weight expects {cig} input channels per group, input has {}", c_in / p.groups),
            ));
        }
        let ho = conv_out_len(h, kh, p.stride, p.pad)
            .ok_or_else(|| Error::shape(layer, format!("kernel {kh} larger than padded height {h}")))?;
        let wo = conv_out_len(w, kw, p.stride, p.pad)
            .ok_or_else(|| Error::shape(layer, format!("kernel {kw} larger than padded width {w}")))?;
        Ok(ConvGeom {
            n,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            ho,
            wo,
            p,
        })
    }

    fn cin_per_group(&self) -> usize {
        self.c_in / self.p.groups
    }

    fn cout_per_group(&self) -> usize {
        self.c_out / self.p.groups
    }

    pub fn out_dims(&self) -> [usize; 4] {
        [self.n, self.c_out, self.ho, self.wo]
    }

    /// Output indices `o` in `[lo, hi)` whose tap `o*stride + k - pad` lands
    /// inside `[0, len)`.
    fn valid(&self, k: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.p.stride as isize;
        let off = k as isize - self.p.pad as isize;
        // smallest o with o*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest o with o*s + off <= len-1
        let last = len as isize - 1 - off;
        let hi = if last < 0 { 0 } else { (last / s + 1).min(out_len as isize) };
        let lo = lo.min(out_len as isize);
        (lo as usize, hi.max(lo) as usize)
    }

    /// Visits every (output plane, input plane, kernel tap) triple with the
    /// precomputed valid output window.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(Tap)) {
        let (cig, cog) = (self.cin_per_group(), self.cout_per_group());
        for b in 0..self.n {
            for co in 0..self.c_out {
                let g = co / cog;
                for cil in 0..cig {
                    let ci = g * cig + cil;
                    for ky in 0..self.kh {
                        let (oy0, oy1) = self.valid(ky, self.h, self.ho);
                        if oy0 >= oy1 {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let (ox0, ox1) = self.valid(kx, self.w, self.wo);
                            if ox0 >= ox1 {
                                continue;
                            }
                            f(Tap {
                                out_plane: (b * self.c_out + co) * self.ho * self.wo,
                                in_plane: (b * self.c_in + ci) * self.h * self.w,
                                w_index: ((co * cig + cil) * self.kh + ky) * self.kw + kx,
                                ky,
                                kx,
                                oy: (oy0, oy1),
                                ox: (ox0, ox1),
                            });
                        }
                    }
                }
            }
        }
    }
}

struct Tap {
    out_plane: usize,
    in_plane: usize,
    w_index: usize,
    ky: usize,
    kx: usize,
    oy: (usize, usize),
    ox: (usize, usize),
}

/// Generic direct convolution. `A` is the accumulator type, which for the
/// integer path is wider than the operand type.
pub(crate) fn conv_accumulate<T, A>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    out: &mut [A],
    mul: impl Fn(T, T) -> A,
) where
    T: Copy,
    A: Copy + AddAssign,
{
    let (s, pad, width, wo) = (g.p.stride, g.p.pad, g.w, g.wo);
    g.for_each_tap(|t| {
        let wv = w[t.w_index];
        for oy in t.oy.0..t.oy.1 {
            let iy = oy * s + t.ky - pad;
            let xrow = t.in_plane + iy * width;
            let orow = t.out_plane + oy * wo;
            if s == 1 {
                let ix0 = t.ox.0 + t.kx - pad;
                let len = t.ox.1 - t.ox.0;
                let xs = &x[xrow + ix0..xrow + ix0 + len];
                let os = &mut out[orow + t.ox.0..orow + t.ox.1];
                for (o, &xv) in os.iter_mut().zip(xs) {
                    *o += mul(wv, xv);
                }
            } else {
                for ox in t.ox.0..t.ox.1 {
                    let ix = ox * s + t.kx - pad;
                    out[orow + ox] += mul(wv, x[xrow + ix]);
                }
            }
        }
    });
}

/// Gradient of a convolution with respect to its input.
pub(crate) fn conv_backward_input(g: &ConvGeom, grad_out: &[f64], w: &[f64]) -> Vec<f64> {
    if g.p.groups == 1 {
        dense::backward_input(g, grad_out, w)
    } else {
        direct_backward_input(g, grad_out, w)
    }
}

fn direct_backward_input(g: &ConvGeom, grad_out: &[f64], w: &[f64]) -> Vec<f64> {
    let mut gx = vec![0.0; g.n * g.c_in * g.h * g.w];
    let (s, pad, width, wo) = (g.p.stride, g.p.pad, g.w, g.wo);
    g.for_each_tap(|t| {
        let wv = w[t.w_index];
        for oy in t.oy.0..t.oy.1 {
            let iy = oy * s + t.ky - pad;
            let xrow = t.in_plane + iy * width;
            let orow = t.out_plane + oy * wo;
            for ox in t.ox.0..t.ox.1 {
                let ix = ox * s + t.kx - pad;
                gx[xrow + ix] += wv * grad_out[orow + ox];
            }
        }
    });
    gx
}

/// Gradient of a convolution with respect to its weight.
pub(crate) fn conv_backward_weight(g: &ConvGeom, grad_out: &[f64], x: &[f64]) -> Vec<f64> {
    if g.p.groups == 1 {
        dense::backward_weight(g, grad_out, x)
    } else {
        direct_backward_weight(g, grad_out, x)
    }
}

fn direct_backward_weight(g: &ConvGeom, grad_out: &[f64], x: &[f64]) -> Vec<f64> {
    let cig = g.cin_per_group();
    let mut gw = vec![0.0; g.c_out * cig * g.kh * g.kw];
    let (s, pad, width, wo) = (g.p.stride, g.p.pad, g.w, g.wo);
    g.for_each_tap(|t| {
        let mut acc = 0.0;
        for oy in t.oy.0..t.oy.1 {
            let iy = oy * s + t.ky - pad;
            let xrow = t.in_plane + iy * width;
            let orow = t.out_plane + oy * wo;
            if s == 1 {
                let ix0 = t.ox.0 + t.kx - pad;
                let len = t.ox.1 - t.ox.0;
                let xs = &x[xrow + ix0..xrow + ix0 + len];
                let gs = &grad_out[orow + t.ox.0..orow + t.ox.1];
                acc += xs.iter().zip(gs).map(|(a, b)| a * b).sum::<f64>();
            } else {
                for ox in t.ox.0..t.ox.1 {
                    acc += x[xrow + ox * s + t.kx - pad] * grad_out[orow + ox];
                }
            }
        }
        gw[t.w_index] += acc;
    });
    gw
}

/// Ungrouped convolutions as im2col plus a blocked matrix product.
mod dense {
    use super::ConvGeom;

    /// `c = a * b + beta * c` on row/column-strided views.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: (&[f64], isize, isize),
        b: (&[f64], isize, isize),
        beta: f64,
        c: &mut [f64],
    ) {
        assert!(c.len() >= m * n);
        // SAFETY: callers pass slices covering the strided extents.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.0.as_ptr(),
                a.1,
                a.2,
                b.0.as_ptr(),
                b.1,
                b.2,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    impl ConvGeom {
        fn is_pointwise(&self) -> bool {
            self.kh == 1 && self.kw == 1 && self.p.stride == 1 && self.p.pad == 0
        }

        fn col_rows(&self) -> usize {
            self.c_in * self.kh * self.kw
        }

        /// Rows `(ci, ky, kx)`, columns output pixels, zero where padded.
        fn im2col(&self, x: &[f64], col: &mut [f64]) {
            let (np, s, pad) = (self.ho * self.wo, self.p.stride, self.p.pad);
            col.fill(0.0);
            for ci in 0..self.c_in {
                let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
                for ky in 0..self.kh {
                    let (oy0, oy1) = self.valid(ky, self.h, self.ho);
                    for kx in 0..self.kw {
                        let (ox0, ox1) = self.valid(kx, self.w, self.wo);
                        let row = &mut col[((ci * self.kh + ky) * self.kw + kx) * np..][..np];
                        for oy in oy0..oy1 {
                            let src = &plane[(oy * s + ky - pad) * self.w..];
                            let dst = &mut row[oy * self.wo..];
                            for ox in ox0..ox1 {
                                dst[ox] = src[ox * s + kx - pad];
                            }
                        }
                    }
                }
            }
        }

        fn col2im_add(&self, col: &[f64], gx: &mut [f64]) {
            let (np, s, pad) = (self.ho * self.wo, self.p.stride, self.p.pad);
            for ci in 0..self.c_in {
                let plane = &mut gx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
                for ky in 0..self.kh {
                    let (oy0, oy1) = self.valid(ky, self.h, self.ho);
                    for kx in 0..self.kw {
                        let (ox0, ox1) = self.valid(kx, self.w, self.wo);
                        let row = &col[((ci * self.kh + ky) * self.kw + kx) * np..][..np];
                        for oy in oy0..oy1 {
                            let base = (oy * s + ky - pad) * self.w;
                            for ox in ox0..ox1 {
                                plane[base + ox * s + kx - pad] += row[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub(super) fn forward(g: &ConvGeom, x: &[f64], w: &[f64], out: &mut [f64]) {
        let (kk, np) = (g.col_rows(), g.ho * g.wo);
        let in_sz = g.c_in * g.h * g.w;
        let mut col = vec![0.0; if g.is_pointwise() { 0 } else { kk * np }];
        for b in 0..g.n {
            let xb = &x[b * in_sz..(b + 1) * in_sz];
            let src: &[f64] = if g.is_pointwise() {
                xb
            } else {
                g.im2col(xb, &mut col);
                &col
            };
            let ob = &mut out[b * g.c_out * np..(b + 1) * g.c_out * np];
            gemm(g.c_out, kk, np, (w, kk as isize, 1), (src, np as isize, 1), 0.0, ob);
        }
    }

    pub(super) fn backward_input(g: &ConvGeom, grad_out: &[f64], w: &[f64]) -> Vec<f64> {
        let (kk, np) = (g.col_rows(), g.ho * g.wo);
        let in_sz = g.c_in * g.h * g.w;
        let mut gx = vec![0.0; g.n * in_sz];
        let mut col = vec![0.0; if g.is_pointwise() { 0 } else { kk * np }];
        for b in 0..g.n {
            let gb = &grad_out[b * g.c_out * np..(b + 1) * g.c_out * np];
            let wt = (w, 1, kk as isize);
            let gy = (gb, np as isize, 1);
            let dst = &mut gx[b * in_sz..(b + 1) * in_sz];
            if g.is_pointwise() {
                gemm(kk, g.c_out, np, wt, gy, 0.0, dst);
            } else {
                gemm(kk, g.c_out, np, wt, gy, 0.0, &mut col);
                g.col2im_add(&col, dst);
            }
        }
        gx
    }

    pub(super) fn backward_weight(g: &ConvGeom, grad_out: &[f64], x: &[f64]) -> Vec<f64> {
        let (kk, np) = (g.col_rows(), g.ho * g.wo);
        let in_sz = g.c_in * g.h * g.w;
        let mut gw = vec![0.0; g.c_out * kk];
        let mut col = vec![0.0; if g.is_pointwise() { 0 } else { kk * np }];
        for b in 0..g.n {
            let xb = &x[b * in_sz..(b + 1) * in_sz];
            let src: &[f64] = if g.is_pointwise() {
                xb
            } else {
                g.im2col(xb, &mut col);
                &col
            };
            let gb = &grad_out[b * g.c_out * np..(b + 1) * g.c_out * np];
            gemm(g.c_out, np, kk, (gb, np as isize, 1), (src, 1, np as isize), 1.0, &mut gw);
        }
        gw
    }
}

/// 2-D cross-correlation with optional per-output-channel bias.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, p: ConvParams) -> Result<Tensor> {
    let g = ConvGeom::new(input.dims(), weight.dims(), p)?;
    if let Some(b) = bias {
        if b.numel() != g.c_out {
            return Err(Error::shape(
                "conv2d",
                format!("bias has {} values for {} output channels", b.numel(), g.c_out),
            ));
        }
    }
    let mut out = vec![0.0f64; g.n * g.c_out * g.ho * g.wo];
    if g.p.groups == 1 {
        dense::forward(&g, input.data(), weight.data(), &mut out);
    } else {
        conv_accumulate(&g, input.data(), weight.data(), &mut out, |a, b| a * b);
    }
    if let Some(b) = bias {
        add_channel_bias(&mut out, b.data(), g.c_out, g.ho * g.wo);
    }
    Tensor::new(Shape::new(g.out_dims().to_vec())?, out)
}

pub(crate) fn add_channel_bias(out: &mut [f64], bias: &[f64], channels: usize, plane: usize) {
    for (i, chunk) in out.chunks_mut(plane).enumerate() {
        let b = bias[i % channels];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

pub fn leaky_relu(input: &Tensor, slope: f64) -> Tensor {
    debug_assert!(slope > 0.0 && slope < 1.0, "leaky slope {slope} outside (0,1)");
    input.map(|v| if v >= 0.0 { v } else { slope * v })
}

/// Concatenates along `axis`; all other extents must match.
pub fn concat(inputs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::shape("concat", "no inputs"))?;
    let rank = first.shape().rank();
    if axis >= rank {
        return Err(Error::shape("concat", format!("axis {axis} out of range for rank {rank}")));
    }
    let mut dims = first.dims().to_vec();
    dims[axis] = 0;
    for t in inputs {
        let d = t.dims();
        if d.len() != rank || d.iter().enumerate().any(|(i, &v)| i != axis && v != first.dims()[i]) {
            return Err(Error::shape(
                "concat",
                format!("{:?} incompatible with {:?} on axis {axis}", t.shape(), first.shape()),
            ));
        }
        dims[axis] += d[axis];
    }
    let outer: usize = dims[..axis].iter().product();
    let inner: usize = dims[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(dims.iter().product());
    for o in 0..outer {
        for t in inputs {
            let chunk = t.dims()[axis] * inner;
            data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Tensor::new(Shape::new(dims)?, data)
}

/// Inverse of [`concat`]: cuts `input` along `axis` into pieces of the given sizes.
pub fn split(input: &Tensor, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor>> {
    let dims = input.dims();
    if axis >= dims.len() || sizes.iter().sum::<usize>() != dims[axis] {
        return Err(Error::shape(
            "split",
            format!("sizes {sizes:?} do not partition axis {axis} of {:?}", input.shape()),
        ));
    }
    let outer: usize = dims[..axis].iter().product();
    let inner: usize = dims[axis + 1..].iter().product();
    let total = dims[axis] * inner;
    let mut offset = 0;
    sizes
        .iter()
        .map(|&sz| {
            let mut d = dims.to_vec();
            d[axis] = sz;
            let mut data = Vec::with_capacity(outer * sz * inner);
            for o in 0..outer {
                let start = o * total + offset * inner;
                data.extend_from_slice(&input.data()[start..start + sz * inner]);
            }
            offset += sz;
            Tensor::new(Shape::new(d)?, data)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
        let shape = Shape::new(dims.to_vec()).unwrap();
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Six nested loops, no window precomputation.
    fn naive_conv(x: &Tensor, w: &Tensor, p: ConvParams) -> Vec<f64> {
        let [n, ci, h, wd] = x.dims().try_into().unwrap();
        let [co, cig, kh, kw] = w.dims().try_into().unwrap();
        let ho = (h + 2 * p.pad - kh) / p.stride + 1;
        let wo = (wd + 2 * p.pad - kw) / p.stride + 1;
        let cog = co / p.groups;
        let mut out = vec![0.0; n * co * ho * wo];
        for b in 0..n {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..cig {
                            let cin = (o / cog) * cig + c;
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * p.stride + ky) as isize - p.pad as isize;
                                    let ix = (ox * p.stride + kx) as isize - p.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let xv = x.data()[((b * ci + cin) * h + iy as usize) * wd + ix as usize];
                                    let wv = w.data()[((o * cig + c) * kh + ky) * kw + kx];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out[((b * co + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        let _ = ci;
        out
    }

    fn assert_rel_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol * scale, "{x} vs {y}");
        }
    }

    #[test]
    fn all_ones_three_by_three() {
        let x = Tensor::from_vec(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let w = Tensor::from_vec(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let y = conv2d(&x, &w, None, ConvParams::new(1, 0, 1)).unwrap();
        assert_eq!(y.dims(), &[1, 1, 1, 1]);
        assert_eq!(y.data()[0], 9.0);
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[2, 1, 5, 7]);
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = Tensor::from_vec(&[1, 1, 3, 3], k).unwrap();
        let y = conv2d(&x, &w, None, ConvParams::new(1, 1, 1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[1, 4, 8, 8]);
        let w = rand_tensor(&mut rng, &[8, 4, 3, 3]);
        for p in [ConvParams::new(1, 0, 1), ConvParams::new(1, 1, 1), ConvParams::new(2, 1, 1)] {
            let y = conv2d(&x, &w, None, p).unwrap();
            assert_rel_close(y.data(), &naive_conv(&x, &w, p), 1e-5);
        }
    }

    #[test]
    fn depthwise_matches_per_channel_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[2, 6, 9, 7]);
        let w = rand_tensor(&mut rng, &[6, 1, 3, 3]);
        for p in [ConvParams::new(1, 1, 6), ConvParams::new(2, 1, 6)] {
            let y = conv2d(&x, &w, None, p).unwrap();
            // per channel: single-channel conv of each plane
            for c in 0..6 {
                for b in 0..2 {
                    let plane = Tensor::from_vec(
                        &[1, 1, 9, 7],
                        x.data()[(b * 6 + c) * 63..(b * 6 + c + 1) * 63].to_vec(),
                    )
                    .unwrap();
                    let k = Tensor::from_vec(&[1, 1, 3, 3], w.data()[c * 9..c * 9 + 9].to_vec()).unwrap();
                    let r = conv2d(&plane, &k, None, ConvParams::new(p.stride, 1, 1)).unwrap();
                    let hw = r.numel();
                    assert_rel_close(&y.data()[(b * 6 + c) * hw..(b * 6 + c + 1) * hw], r.data(), 1e-6);
                }
            }
            assert_rel_close(y.data(), &naive_conv(&x, &w, p), 1e-6);
        }
    }

    #[test]
    fn dense_path_matches_direct_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..30 {
            let (n, ci, co) = (rng.random_range(1..3), rng.random_range(1..5), rng.random_range(1..5));
            let k = [1, 3][rng.random_range(0..2)];
            let p = ConvParams::new(rng.random_range(1..3), rng.random_range(0..2), 1);
            let (h, w) = (rng.random_range(3..9), rng.random_range(3..9));
            let x = rand_tensor(&mut rng, &[n, ci, h, w]);
            let wt = rand_tensor(&mut rng, &[co, ci, k, k]);
            let g = ConvGeom::new(x.dims(), wt.dims(), p).unwrap();
            let mut direct = vec![0.0; g.n * g.c_out * g.ho * g.wo];
            conv_accumulate(&g, x.data(), wt.data(), &mut direct, |a, b| a * b);
            let fast = conv2d(&x, &wt, None, p).unwrap();
            assert_rel_close(fast.data(), &direct, 1e-12);
            let go: Vec<f64> = (0..direct.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            assert_rel_close(
                &conv_backward_input(&g, &go, wt.data()),
                &direct_backward_input(&g, &go, wt.data()),
                1e-12,
            );
            assert_rel_close(
                &conv_backward_weight(&g, &go, x.data()),
                &direct_backward_weight(&g, &go, x.data()),
                1e-12,
            );
        }
    }

    #[test]
    fn conv_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = ConvParams::new(1, 1, 1);
        for _ in 0..10 {
            let x = rand_tensor(&mut rng, &[1, 3, 6, 6]);
            let z = rand_tensor(&mut rng, &[1, 3, 6, 6]);
            let w = rand_tensor(&mut rng, &[4, 3, 3, 3]);
            let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let mix = x.zip_map(&z, |u, v| a * u + b * v).unwrap();
            let lhs = conv2d(&mix, &w, None, p).unwrap();
            let cx = conv2d(&x, &w, None, p).unwrap();
            let cz = conv2d(&z, &w, None, p).unwrap();
            let rhs = cx.zip_map(&cz, |u, v| a * u + b * v).unwrap();
            assert_rel_close(lhs.data(), rhs.data(), 1e-5);
        }
    }

    #[test]
    fn bias_and_shape_errors() {
        let x = Tensor::zeros(Shape::nchw(1, 2, 4, 4).unwrap());
        let w = Tensor::zeros(Shape::nchw(3, 2, 3, 3).unwrap());
        let b = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = conv2d(&x, &w, Some(&b), ConvParams::new(1, 1, 1)).unwrap();
        assert_eq!(y.data()[0], 1.0);
        assert_eq!(y.data()[16 * 2], 3.0);
        let bad = Tensor::zeros(Shape::nchw(3, 3, 3, 3).unwrap());
        assert!(matches!(conv2d(&x, &bad, None, ConvParams::new(1, 1, 1)), Err(Error::Shape { .. })));
        assert!(conv2d(&x, &w, None, ConvParams::new(0, 1, 1)).is_err());
        assert!(conv2d(&x, &w, None, ConvParams::new(1, 1, 2)).is_err());
    }

    #[test]
    fn output_size_formula() {
        assert_eq!(conv_out_len(120, 3, 2, 1), Some(60));
        assert_eq!(conv_out_len(15, 3, 2, 1), Some(8));
        assert_eq!(conv_out_len(2, 5, 1, 0), None);
    }

    #[test]
    fn leaky_relu_cases() {
        let t = Tensor::from_vec(&[3], vec![0.0, -8.0, 3.5]).unwrap();
        assert_eq!(leaky_relu(&t, 0.125).data(), &[0.0, -1.0, 3.5]);
        assert_eq!(leaky_relu(&t, 0.5).data()[2], 3.5);
    }

    #[test]
    fn concat_channel_shapes() {
        let a = Tensor::zeros(Shape::nchw(1, 2, 4, 4).unwrap());
        let b = Tensor::full(Shape::nchw(1, 2, 4, 4).unwrap(), 1.0);
        assert_eq!(concat(&[&a, &b], 1).unwrap().dims(), &[1, 4, 4, 4]);
        assert_eq!(concat(&[&a], 1).unwrap(), a);
        let c = Tensor::zeros(Shape::nchw(1, 2, 3, 4).unwrap());
        assert!(concat(&[&a, &c], 1).is_err());
    }

    #[test]
    fn concat_three_against_index_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let parts: Vec<Tensor> = [2, 3, 5].iter().map(|&c| rand_tensor(&mut rng, &[2, c, 2, 3])).collect();
        let refs: Vec<&Tensor> = parts.iter().collect();
        let y = concat(&refs, 1).unwrap();
        assert_eq!(y.dims(), &[2, 10, 2, 3]);
        // index map: output channel -> (part, channel within part)
        let map: Vec<(usize, usize)> = [2usize, 3, 5]
            .iter()
            .enumerate()
            .flat_map(|(p, &c)| (0..c).map(move |k| (p, k)))
            .collect();
        for b in 0..2 {
            for (oc, &(p, k)) in map.iter().enumerate() {
                let pc = parts[p].dims()[1];
                for i in 0..6 {
                    assert_eq!(y.data()[(b * 10 + oc) * 6 + i], parts[p].data()[(b * pc + k) * 6 + i]);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn split_undoes_concat(sizes in proptest::collection::vec(1usize..4, 1..4), n in 1usize..3, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let parts: Vec<Tensor> = sizes.iter().map(|&c| rand_tensor(&mut rng, &[n, c, 3, 2])).collect();
            let refs: Vec<&Tensor> = parts.iter().collect();
            let joined = concat(&refs, 1).unwrap();
            let back = split(&joined, 1, &sizes).unwrap();
            prop_assert_eq!(back, parts);
        }
    }
}
