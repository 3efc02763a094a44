//! Convolution kernels (im2col + GEMM) and bilinear upsampling weights.
//!
//! Kernel layouts follow the usual convention: a convolution kernel is
//! `(out, in, k, k)`, a transposed-convolution kernel is `(in, out, k, k)`.
//! With that choice `conv_transpose2d(y, w)` is exactly the adjoint of
//! `conv2d(x, w)` for the same `w`, stride and padding, so each op's forward
//! pass is the other's input gradient.

use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tensor::{gemm, Mat, Tensor};

/// Geometry of one image of a (forward) convolution.
#[derive(Clone, Copy, Debug)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// A 1x1 stride-1 unpadded convolution reads its input as the column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Real>(x: &[T], g: &Geom, cols: &mut [T]) {
    let n_out = g.cols();
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * n_out..(row + 1) * n_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::ZERO);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { T::ZERO } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column matrix back into image layout (adjoint of `im2col`).
fn col2im<T: Real>(cols: &[T], g: &Geom, x: &mut [T]) {
    let n_out = g.cols();
    for ci in 0..g.c {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * n_out..(row + 1) * n_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in src[oy * g.wo..(oy + 1) * g.wo].iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn square_kernel<T: Real>(kernel: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (a, b, kh, kw) = kernel.nchw()?;
    if kh != kw {
        return shape_err(format!("kernel must be square, got {:?}", kernel.shape()));
    }
    Ok((a, b, kh))
}

/// Output extent of a convolution along one axis, if positive.
pub fn conv_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    (stride > 0 && padded >= k).then(|| (padded - k) / stride + 1)
}

/// Output extent of a transposed convolution along one axis, if positive.
pub fn conv_transpose_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let full = (input - 1) * stride + k;
    (stride > 0 && full > 2 * pad).then(|| full - 2 * pad)
}

fn conv_geom<T: Real>(input: &Tensor<T>, kernel: &Tensor<T>, stride: usize, pad: usize) -> Result<(Geom, usize)> {
    let (_, c, h, w) = input.nchw()?;
    let (o, i, k) = square_kernel(kernel)?;
    if i != c {
        return shape_err(format!("conv2d: input has {c} channels, kernel expects {i}"));
    }
    if stride == 0 {
        return shape_err("conv2d: stride must be >= 1");
    }
    let (Some(ho), Some(wo)) = (conv_out_extent(h, k, stride, pad), conv_out_extent(w, k, stride, pad)) else {
        return shape_err(format!("conv2d: {h}x{w} input with pad {pad} is smaller than kernel {k}"));
    };
    Ok((Geom { c, h, w, k, stride, pad, ho, wo }, o))
}

/// Transposed conv geometry, expressed as the geometry of its adjoint convolution
/// (which maps the transposed conv's *output* back to its input).
fn conv_transpose_geom<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Geom, usize)> {
    let (_, c, h, w) = input.nchw()?;
    let (i, o, k) = square_kernel(kernel)?;
    if i != c {
        return shape_err(format!("conv_transpose2d: input has {c} channels, kernel expects {i}"));
    }
    if stride == 0 {
        return shape_err("conv_transpose2d: stride must be >= 1");
    }
    let (Some(ho), Some(wo)) =
        (conv_transpose_out_extent(h, k, stride, pad), conv_transpose_out_extent(w, k, stride, pad))
    else {
        return shape_err(format!("conv_transpose2d: non-positive output extent (pad {pad})"));
    };
    Ok((Geom { c: o, h: ho, w: wo, k, stride, pad, ho: h, wo: w }, c))
}

pub(crate) fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (g, o) = conv_geom(input, kernel, stride, pad)?;
    let n = input.shape()[0];
    let in_sz = g.c * g.h * g.w;
    let out_sz = o * g.cols();
    let mut out = vec![T::ZERO; n * out_sz];
    let wmat = Mat::new(kernel.data(), o, g.rows());
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::ZERO; g.rows() * g.cols()] };
    for b in 0..n {
        let x = &input.data()[b * in_sz..(b + 1) * in_sz];
        let rhs = if g.is_pointwise() {
            x
        } else {
            im2col(x, &g, &mut cols);
            &cols
        };
        gemm(wmat, Mat::new(rhs, g.rows(), g.cols()), T::ZERO, &mut out[b * out_sz..(b + 1) * out_sz]);
    }
    Tensor::new(&[n, o, g.ho, g.wo], out)
}

/// Returns `(d_input, d_kernel)`.
pub(crate) fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    dy: &[T],
    stride: usize,
    pad: usize,
    want_input: bool,
    want_kernel: bool,
) -> Result<(Option<Vec<T>>, Option<Vec<T>>)> {
    let (g, o) = conv_geom(input, kernel, stride, pad)?;
    let n = input.shape()[0];
    let in_sz = g.c * g.h * g.w;
    let out_sz = o * g.cols();
    let wmat = Mat::new(kernel.data(), o, g.rows());
    let mut dx = want_input.then(|| vec![T::ZERO; input.numel()]);
    let mut dw = want_kernel.then(|| vec![T::ZERO; kernel.numel()]);
    let mut cols = vec![T::ZERO; if g.is_pointwise() { 0 } else { g.rows() * g.cols() }];
    for b in 0..n {
        let dyb = Mat::new(&dy[b * out_sz..(b + 1) * out_sz], o, g.cols());
        if let Some(dw) = dw.as_mut() {
            let x = &input.data()[b * in_sz..(b + 1) * in_sz];
            let rhs = if g.is_pointwise() {
                x
            } else {
                im2col(x, &g, &mut cols);
                &cols
            };
            gemm(dyb, Mat::new(rhs, g.rows(), g.cols()).t(), T::ONE, dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * in_sz..(b + 1) * in_sz];
            if g.is_pointwise() {
                gemm(wmat.t(), dyb, T::ZERO, dxb);
            } else {
                gemm(wmat.t(), dyb, T::ZERO, &mut cols);
                col2im(&cols, &g, dxb);
            }
        }
    }
    Ok((dx, dw))
}

pub(crate) fn conv_transpose2d_forward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (g, ci) = conv_transpose_geom(input, kernel, stride, pad)?;
    let n = input.shape()[0];
    let in_sz = ci * g.cols();
    let out_sz = g.c * g.h * g.w;
    let wmat = Mat::new(kernel.data(), ci, g.rows());
    let mut out = vec![T::ZERO; n * out_sz];
    let mut cols = vec![T::ZERO; g.rows() * g.cols()];
    for b in 0..n {
        let x = Mat::new(&input.data()[b * in_sz..(b + 1) * in_sz], ci, g.cols());
        let ob = &mut out[b * out_sz..(b + 1) * out_sz];
        if g.is_pointwise() {
            gemm(wmat.t(), x, T::ZERO, ob);
        } else {
            gemm(wmat.t(), x, T::ZERO, &mut cols);
            col2im(&cols, &g, ob);
        }
    }
    Tensor::new(&[n, g.c, g.h, g.w], out)
}

pub(crate) fn conv_transpose2d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    dy: &[T],
    stride: usize,
    pad: usize,
    want_input: bool,
    want_kernel: bool,
) -> Result<(Option<Vec<T>>, Option<Vec<T>>)> {
    let (g, ci) = conv_transpose_geom(input, kernel, stride, pad)?;
    let n = input.shape()[0];
    let in_sz = ci * g.cols();
    let out_sz = g.c * g.h * g.w;
    let wmat = Mat::new(kernel.data(), ci, g.rows());
    let mut dx = want_input.then(|| vec![T::ZERO; input.numel()]);
    let mut dw = want_kernel.then(|| vec![T::ZERO; kernel.numel()]);
    let mut cols = vec![T::ZERO; if g.is_pointwise() { 0 } else { g.rows() * g.cols() }];
    for b in 0..n {
        let dyb = &dy[b * out_sz..(b + 1) * out_sz];
        let ycols = if g.is_pointwise() {
            dyb
        } else {
            im2col(dyb, &g, &mut cols);
            &cols
        };
        let ymat = Mat::new(ycols, g.rows(), g.cols());
        if let Some(dx) = dx.as_mut() {
            gemm(wmat, ymat, T::ZERO, &mut dx[b * in_sz..(b + 1) * in_sz]);
        }
        if let Some(dw) = dw.as_mut() {
            let x = Mat::new(&input.data()[b * in_sz..(b + 1) * in_sz], ci, g.cols());
            gemm(x, ymat.t(), T::ONE, dw);
        }
    }
    Ok((dx, dw))
}

/// Size and stride of a bilinear upsampling kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BilinearSpec {
    pub size: usize,
    pub stride: usize,
}

impl BilinearSpec {
    /// The kernel that upsamples by `factor` with no overlap gaps (`size = 2 * factor`).
    pub fn for_factor(factor: usize) -> Self {
        BilinearSpec { size: 2 * factor, stride: factor }
    }

    /// Padding that makes a transposed conv of this spec produce exactly
    /// `stride * input` output pixels. Only meaningful for `size = 2 * stride`.
    pub fn same_padding(&self) -> usize {
        self.stride / 2
    }

    /// One-dimensional interpolation weights.
    ///
    /// For `size <= 2` this is `1 - |x - (K-1)/2|` taken literally. Beyond
    /// that the literal form goes negative, so the offset is scaled by
    /// `f = ceil(K/2)` around the conventional center instead.
    pub fn weights_1d(&self) -> Vec<f64> {
        let k = self.size;
        if k <= 2 {
            let center = (k as f64 - 1.0) / 2.0;
            return (0..k).map(|x| 1.0 - (x as f64 - center).abs()).collect();
        }
        let f = k.div_ceil(2) as f64;
        let center = if k % 2 == 1 { f - 1.0 } else { f - 0.5 };
        (0..k).map(|x| 1.0 - (x as f64 - center).abs() / f).collect()
    }
}

/// Per-channel bilinear kernel of shape `(channels, channels, K, K)`: channel
/// `c` upsamples onto channel `c` only.
pub fn bilinear_kernel<T: Real>(spec: BilinearSpec, channels: usize) -> Result<Tensor<T>> {
    if spec.size == 0 || spec.stride == 0 || channels == 0 {
        return shape_err(format!("bilinear kernel needs positive size/stride/channels, got {spec:?} x {channels}"));
    }
    let k = spec.size;
    let w1 = spec.weights_1d();
    let mut data = vec![T::ZERO; channels * channels * k * k];
    for c in 0..channels {
        let base = (c * channels + c) * k * k;
        for y in 0..k {
            for x in 0..k {
                data[base + y * k + x] = T::from_f64(w1[y] * w1[x]);
            }
        }
    }
    Tensor::new(&[channels, channels, k, k], data)
}
