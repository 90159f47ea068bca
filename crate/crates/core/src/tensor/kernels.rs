//! Forward and backward kernels on plain tensors.
//!
//! The graph in [`super::Graph`] records which kernel produced each value and
//! calls the matching backward kernel; inference code calls the forward
//! kernels directly.

use rayon::prelude::*;

use super::winograd::{Scratch, Tiling};
use super::{Scalar, Shape, Tensor, View, ViewMut};
use crate::error::{Error, Result};

/// Spatial extent of every learned convolution.
pub const KERNEL_SIZE: usize = 3;
const TAPS: usize = KERNEL_SIZE * KERNEL_SIZE;

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Convolution (3x3, zero padding 1, cross-correlation)

/// Output spatial extent of a 3x3 convolution with padding 1.
pub fn conv_output_extent(extent: usize, stride: usize) -> usize {
    (extent + 2 - KERNEL_SIZE) / stride + 1
}

struct ConvGeometry {
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    stride: usize,
}

impl ConvGeometry {
    fn new<T: Scalar>(
        input: Shape,
        kernel: &Tensor<T>,
        bias_len: usize,
        stride: usize,
    ) -> Result<Self> {
        let k = kernel.shape();
        if stride != 1 && stride != 2 {
            return Err(Error::invalid(
                "conv2d",
                format!("stride must be 1 or 2, got {stride}"),
            ));
        }
        if k.h != KERNEL_SIZE || k.w != KERNEL_SIZE {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel must be 3x3, got {k}"),
            ));
        }
        if k.c != input.c {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: input,
                right: k,
            });
        }
        if bias_len != k.n {
            return Err(Error::invalid(
                "conv2d",
                format!("bias has {bias_len} entries for {} output channels", k.n),
            ));
        }
        Ok(Self {
            c_in: input.c,
            c_out: k.n,
            h: input.h,
            w: input.w,
            ho: conv_output_extent(input.h, stride),
            wo: conv_output_extent(input.w, stride),
            stride,
        })
    }

    fn rows(&self) -> usize {
        self.c_in * TAPS
    }

    /// Stride-1 convolutions over even extents use Winograd tiles.
    fn tiling(&self) -> Option<Tiling> {
        (self.stride == 1 && Tiling::applies(self.h, self.w)).then_some(Tiling {
            c_in: self.c_in,
            c_out: self.c_out,
            h: self.h,
            w: self.w,
        })
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// Unfolds one sample into a `(c_in*9) x (ho*wo)` patch matrix.
    /// Output columns `lo..hi` whose input column `ox * stride + kx - 1` is
    /// inside the image.
    fn valid_columns(&self, kx: usize) -> (usize, usize) {
        let lo = if kx == 0 { 1 } else { 0 };
        let hi = if self.w >= kx {
            ((self.w - kx) / self.stride + 1).min(self.wo)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let p = self.positions();
        for ci in 0..self.c_in {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..KERNEL_SIZE {
                for kx in 0..KERNEL_SIZE {
                    let row = (ci * TAPS + ky * KERNEL_SIZE + kx) * p;
                    let (lo, hi) = self.valid_columns(kx);
                    for oy in 0..self.ho {
                        let dst = &mut cols[row + oy * self.wo..row + (oy + 1) * self.wo];
                        let iy = (oy * self.stride + ky) as isize - 1;
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        dst[..lo].fill(T::zero());
                        dst[hi..].fill(T::zero());
                        let start = lo * self.stride + kx - 1;
                        if self.stride == 1 {
                            dst[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        } else {
                            for (d, s) in dst[lo..hi]
                                .iter_mut()
                                .zip(src[start..].iter().step_by(self.stride))
                            {
                                *d = *s;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatters patch gradients back to the sample.
    fn col2im<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let p = self.positions();
        for ci in 0..self.c_in {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..KERNEL_SIZE {
                for kx in 0..KERNEL_SIZE {
                    let row = (ci * TAPS + ky * KERNEL_SIZE + kx) * p;
                    let (lo, hi) = self.valid_columns(kx);
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - 1;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &cols[row + oy * self.wo + lo..row + oy * self.wo + hi];
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let start = lo * self.stride + kx - 1;
                        for (d, &g) in dst[start..].iter_mut().step_by(self.stride).zip(src) {
                            *d = *d + g;
                        }
                    }
                }
            }
        }
    }
}

/// Zero-padded copy of one sample for stride-1 convolutions.
///
/// Each channel is stored as `(h+2) x (w+2)` plus two spare elements, so the
/// tap `(ky, kx)` of every output position `(y, x)` sits at
/// `ky * (w+2) + kx + y * (w+2) + x` within the channel. Output rows are
/// computed with `w+2` columns; the last two of each row are discarded.
struct Padded {
    row: usize,
    plane: usize,
    positions: usize,
}

impl Padded {
    fn new(geo: &ConvGeometry) -> Self {
        let row = geo.w + 2;
        Self {
            row,
            plane: (geo.h + 2) * row + 2,
            positions: geo.h * row,
        }
    }

    fn tap_offset(&self, tap: usize) -> usize {
        (tap / KERNEL_SIZE) * self.row + tap % KERNEL_SIZE
    }

    fn fill<T: Scalar>(&self, geo: &ConvGeometry, x: &[T], buf: &mut [T]) {
        buf.fill(T::zero());
        for ci in 0..geo.c_in {
            for y in 0..geo.h {
                let src = &x[(ci * geo.h + y) * geo.w..][..geo.w];
                buf[ci * self.plane + (y + 1) * self.row + 1..][..geo.w].copy_from_slice(src);
            }
        }
    }
}

impl ConvGeometry {
    fn forward_shifted<T: Scalar>(
        &self,
        x: &[T],
        kernel: &[T],
        bias: &[T],
        dst: &mut [T],
        xp: &mut Vec<T>,
        ext: &mut Vec<T>,
    ) {
        let pad = Padded::new(self);
        xp.resize(self.c_in * pad.plane, T::zero());
        ext.resize(self.c_out * pad.positions, T::zero());
        pad.fill(self, x, xp);
        for tap in 0..TAPS {
            T::gemm_view(
                self.c_out,
                self.c_in,
                pad.positions,
                View {
                    data: kernel,
                    offset: tap,
                    rs: self.rows(),
                    cs: TAPS,
                },
                View {
                    data: xp,
                    offset: pad.tap_offset(tap),
                    rs: pad.plane,
                    cs: 1,
                },
                ViewMut {
                    data: ext,
                    offset: 0,
                    rs: pad.positions,
                    cs: 1,
                },
                tap > 0,
            );
        }
        for (co, plane) in dst.chunks_mut(self.h * self.w).enumerate() {
            let b = bias[co];
            for (y, out_row) in plane.chunks_mut(self.w).enumerate() {
                let src = &ext[co * pad.positions + y * pad.row..][..self.w];
                out_row.iter_mut().zip(src).for_each(|(o, &v)| *o = v + b);
            }
        }
    }

    /// Kernel and (optionally) input gradients for one sample at stride 1.
    fn backward_shifted<T: Scalar>(
        &self,
        x: &[T],
        kernel: &[T],
        dy: &[T],
        dk: &mut [T],
        dx: Option<&mut [T]>,
    ) {
        let pad = Padded::new(self);
        let mut xp = vec![T::zero(); self.c_in * pad.plane];
        pad.fill(self, x, &mut xp);
        // Upstream gradient laid out like the padded output rows, with the
        // discarded columns set to zero.
        let mut dy_ext = vec![T::zero(); self.c_out * pad.positions];
        for co in 0..self.c_out {
            for y in 0..self.h {
                dy_ext[co * pad.positions + y * pad.row..][..self.w]
                    .copy_from_slice(&dy[(co * self.h + y) * self.w..][..self.w]);
            }
        }
        for tap in 0..TAPS {
            T::gemm_view(
                self.c_out,
                pad.positions,
                self.c_in,
                View {
                    data: &dy_ext,
                    offset: 0,
                    rs: pad.positions,
                    cs: 1,
                },
                View {
                    data: &xp,
                    offset: pad.tap_offset(tap),
                    rs: 1,
                    cs: pad.plane,
                },
                ViewMut {
                    data: dk,
                    offset: tap,
                    rs: self.rows(),
                    cs: TAPS,
                },
                false,
            );
        }
        let Some(dx) = dx else { return };
        // The padded input buffer is reused for its gradient.
        xp.fill(T::zero());
        for tap in 0..TAPS {
            T::gemm_view(
                self.c_in,
                self.c_out,
                pad.positions,
                View {
                    data: kernel,
                    offset: tap,
                    rs: TAPS,
                    cs: self.rows(),
                },
                View {
                    data: &dy_ext,
                    offset: 0,
                    rs: pad.positions,
                    cs: 1,
                },
                ViewMut {
                    data: &mut xp,
                    offset: pad.tap_offset(tap),
                    rs: pad.plane,
                    cs: 1,
                },
                true,
            );
        }
        for ci in 0..self.c_in {
            for y in 0..self.h {
                dx[(ci * self.h + y) * self.w..][..self.w]
                    .copy_from_slice(&xp[ci * pad.plane + (y + 1) * pad.row + 1..][..self.w]);
            }
        }
    }
}

/// Cross-correlation with a `(c_out, c_in, 3, 3)` kernel, zero padding 1.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &[T],
    stride: usize,
) -> Result<Tensor<T>> {
    let s = input.shape();
    let geo = ConvGeometry::new(s, kernel, bias.len(), stride)?;
    let out_shape = Shape::new(s.n, geo.c_out, geo.ho, geo.wo);
    let p = geo.positions();
    let mut out = vec![T::zero(); out_shape.numel()];
    if let Some(tiling) = geo.tiling() {
        out.par_chunks_mut(out_shape.sample())
            .enumerate()
            .for_each_init(Scratch::default, |scratch, (n, dst)| {
                tiling.forward(input.sample(n), kernel.data(), bias, dst, scratch)
            });
        return Tensor::new(out_shape, out);
    }
    if stride == 1 {
        out.par_chunks_mut(out_shape.sample())
            .enumerate()
            .for_each_init(
                || (Vec::new(), Vec::new()),
                |(xp, ext), (n, dst)| {
                    geo.forward_shifted(input.sample(n), kernel.data(), bias, dst, xp, ext)
                },
            );
        return Tensor::new(out_shape, out);
    }
    out.par_chunks_mut(out_shape.sample())
        .enumerate()
        .for_each_init(
            || vec![T::zero(); geo.rows() * p],
            |cols, (n, dst)| {
                geo.im2col(input.sample(n), cols);
                T::gemm(
                    geo.c_out,
                    geo.rows(),
                    p,
                    kernel.data(),
                    false,
                    cols,
                    false,
                    dst,
                    false,
                );
                for (co, plane) in dst.chunks_mut(p).enumerate() {
                    let b = bias[co];
                    plane.iter_mut().for_each(|v| *v = *v + b);
                }
            },
        );
    Tensor::new(out_shape, out)
}

pub struct ConvGrads<T: Scalar> {
    pub input: Option<Tensor<T>>,
    pub kernel: Tensor<T>,
    pub bias: Vec<T>,
}

/// Gradients of [`conv2d`] given the upstream gradient `grad_out`.
///
/// Per-sample partial sums are reduced in sample order, so the result does not
/// depend on thread scheduling.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let s = input.shape();
    let geo = ConvGeometry::new(s, kernel, kernel.shape().n, stride)?;
    let p = geo.positions();
    let k = geo.rows();
    let expected = Shape::new(s.n, geo.c_out, geo.ho, geo.wo);
    if grad_out.shape() != expected {
        return Err(Error::ShapeMismatch {
            op: "conv2d backward",
            left: expected,
            right: grad_out.shape(),
        });
    }

    let partials: Vec<(Vec<T>, Vec<T>, Option<Vec<T>>)> = (0..s.n)
        .into_par_iter()
        .map(|n| {
            let dy = grad_out.sample(n);
            let db: Vec<T> = dy
                .chunks(p)
                .map(|plane| T::from_f64_lossy(plane.iter().map(|v| v.as_f64()).sum()))
                .collect();
            let mut dk = vec![T::zero(); geo.c_out * k];
            if let Some(tiling) = geo.tiling() {
                let mut dx = need_input.then(|| vec![T::zero(); s.sample()]);
                tiling.backward(
                    input.sample(n),
                    kernel.data(),
                    dy,
                    &mut dk,
                    dx.as_deref_mut(),
                );
                return (dk, db, dx);
            }
            if stride == 1 {
                let mut dx = need_input.then(|| vec![T::zero(); s.sample()]);
                geo.backward_shifted(
                    input.sample(n),
                    kernel.data(),
                    dy,
                    &mut dk,
                    dx.as_deref_mut(),
                );
                return (dk, db, dx);
            }
            let mut cols = vec![T::zero(); k * p];
            geo.im2col(input.sample(n), &mut cols);
            T::gemm(geo.c_out, p, k, dy, false, &cols, true, &mut dk, false);
            let dx = need_input.then(|| {
                // Reuse the patch buffer for the patch gradients.
                T::gemm(
                    k,
                    geo.c_out,
                    p,
                    kernel.data(),
                    true,
                    dy,
                    false,
                    &mut cols,
                    false,
                );
                let mut dx = vec![T::zero(); s.sample()];
                geo.col2im(&cols, &mut dx);
                dx
            });
            (dk, db, dx)
        })
        .collect();

    let mut dk = vec![T::zero(); geo.c_out * k];
    let mut db = vec![T::zero(); geo.c_out];
    let mut dx = need_input.then(|| Vec::with_capacity(s.numel()));
    for (pk, pb, px) in partials {
        dk.iter_mut().zip(&pk).for_each(|(a, &b)| *a = *a + b);
        db.iter_mut().zip(&pb).for_each(|(a, &b)| *a = *a + b);
        if let (Some(dx), Some(px)) = (dx.as_mut(), px) {
            dx.extend_from_slice(&px);
        }
    }
    Ok(ConvGrads {
        input: dx.map(|d| Tensor::new(s, d)).transpose()?,
        kernel: Tensor::new(kernel.shape(), dk)?,
        bias: db,
    })
}

// ---------------------------------------------------------------------------
// Mish

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `x * tanh(softplus(x))`.
pub fn mish_scalar<T: Scalar>(x: T) -> T {
    if x > mish_linear_above() {
        return x;
    }
    // tanh(ln(1 + e^x)) = n / (n + 2) with n = e^x (e^x + 2).
    let e = x.exp();
    let n = e * (e + two());
    x * (n / (n + two()))
}

/// Derivative of [`mish_scalar`].
pub fn mish_derivative<T: Scalar>(x: T) -> T {
    mish_and_derivative(x).1
}

/// `(mish(x), mish'(x))` sharing one exponential.
pub fn mish_and_derivative<T: Scalar>(x: T) -> (T, T) {
    if x > mish_linear_above() {
        return (x, T::one());
    }
    let e = x.exp();
    let n = e * (e + two());
    let d = n + two();
    let tanh_sp = n / d;
    // sech^2 of the softplus, written without cancellation.
    let sech2 = two::<T>() * two::<T>() * (n + T::one()) / (d * d);
    (x * tanh_sp, tanh_sp + x * sech2 * (e / (T::one() + e)))
}

fn two<T: Scalar>() -> T {
    T::one() + T::one()
}

/// Past this point mish(x) equals x to within double precision.
fn mish_linear_above<T: Scalar>() -> T {
    T::from_f64_lossy(20.0)
}

pub fn mish<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(mish_scalar)
}

/// Mish values plus the local derivative, for use with [`mish_backward_cached`].
pub fn mish_with_derivative<T: Scalar>(input: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let (value, deriv): (Vec<T>, Vec<T>) =
        input.data().iter().map(|&x| mish_and_derivative(x)).unzip();
    let s = input.shape();
    (
        Tensor::new(s, value).expect("same shape"),
        Tensor::new(s, deriv).expect("same shape"),
    )
}

pub fn mish_backward_cached<T: Scalar>(derivative: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = derivative
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&d, &g)| g * d)
        .collect();
    Tensor::new(derivative.shape(), data).expect("same shape")
}

pub fn mish_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| g * mish_derivative(x))
        .collect();
    Tensor::new(input.shape(), data).expect("same shape")
}

// ---------------------------------------------------------------------------
// Channel concatenation

pub fn concat_channels<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::invalid("concat_channels", "no inputs"))?
        .shape();
    let mut channels = 0;
    for t in inputs {
        let s = t.shape();
        if s.n != first.n || s.h != first.h || s.w != first.w {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                left: first,
                right: s,
            });
        }
        channels += s.c;
    }
    let out_shape = first.with_c(channels);
    let mut data = Vec::with_capacity(out_shape.numel());
    for n in 0..first.n {
        for t in inputs {
            data.extend_from_slice(t.sample(n));
        }
    }
    Tensor::new(out_shape, data)
}

/// Splits along channels into pieces of the given widths; inverse of
/// [`concat_channels`].
pub fn split_channels<T: Scalar>(input: &Tensor<T>, widths: &[usize]) -> Result<Vec<Tensor<T>>> {
    let s = input.shape();
    if widths.iter().sum::<usize>() != s.c {
        return Err(Error::invalid(
            "split_channels",
            format!("widths {widths:?} do not sum to {} channels", s.c),
        ));
    }
    let plane = s.plane();
    let mut parts: Vec<Vec<T>> = widths
        .iter()
        .map(|&c| Vec::with_capacity(s.n * c * plane))
        .collect();
    for n in 0..s.n {
        let mut offset = 0;
        let sample = input.sample(n);
        for (part, &c) in parts.iter_mut().zip(widths) {
            part.extend_from_slice(&sample[offset * plane..(offset + c) * plane]);
            offset += c;
        }
    }
    parts
        .into_iter()
        .zip(widths)
        .map(|(data, &c)| Tensor::new(s.with_c(c), data))
        .collect()
}

// ---------------------------------------------------------------------------
// Bilinear upsampling, align_corners = false

#[derive(Clone, Copy)]
struct Tap<T> {
    lo: usize,
    hi: usize,
    frac: T,
}

fn upsample_taps<T: Scalar>(extent: usize, factor: usize) -> Vec<Tap<T>> {
    (0..extent * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(extent - 1);
            let hi = (lo + 1).min(extent - 1);
            Tap {
                lo,
                hi,
                frac: T::from_f64_lossy(src - lo as f64),
            }
        })
        .collect()
}

fn check_factor(factor: usize) -> Result<()> {
    if factor == 0 {
        return Err(Error::invalid(
            "bilinear_upsample",
            "factor must be at least 1",
        ));
    }
    Ok(())
}

pub fn bilinear_upsample<T: Scalar>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    check_factor(factor)?;
    let s = input.shape();
    let out_shape = Shape::new(s.n, s.c, s.h * factor, s.w * factor);
    let rows = upsample_taps::<T>(s.h, factor);
    let cols = upsample_taps::<T>(s.w, factor);
    let mut out = Vec::with_capacity(out_shape.numel());
    for plane in input.data().chunks(s.plane()) {
        for ry in &rows {
            let top = &plane[ry.lo * s.w..(ry.lo + 1) * s.w];
            let bottom = &plane[ry.hi * s.w..(ry.hi + 1) * s.w];
            for cx in &cols {
                // Lerp form keeps constant inputs exactly constant.
                let t = top[cx.lo] + cx.frac * (top[cx.hi] - top[cx.lo]);
                let b = bottom[cx.lo] + cx.frac * (bottom[cx.hi] - bottom[cx.lo]);
                out.push(t + ry.frac * (b - t));
            }
        }
    }
    Tensor::new(out_shape, out)
}

pub fn bilinear_upsample_backward<T: Scalar>(
    input_shape: Shape,
    grad_out: &Tensor<T>,
    factor: usize,
) -> Result<Tensor<T>> {
    check_factor(factor)?;
    let s = input_shape;
    let rows = upsample_taps::<T>(s.h, factor);
    let cols = upsample_taps::<T>(s.w, factor);
    let mut dx = vec![T::zero(); s.numel()];
    let wo = s.w * factor;
    for (plane, gplane) in dx
        .chunks_mut(s.plane())
        .zip(grad_out.data().chunks(s.plane() * factor * factor))
    {
        for (oy, ry) in rows.iter().enumerate() {
            for (ox, cx) in cols.iter().enumerate() {
                let g = gplane[oy * wo + ox];
                let gy0 = g * (T::one() - ry.frac);
                let gy1 = g * ry.frac;
                let w0 = T::one() - cx.frac;
                plane[ry.lo * s.w + cx.lo] = plane[ry.lo * s.w + cx.lo] + gy0 * w0;
                plane[ry.lo * s.w + cx.hi] = plane[ry.lo * s.w + cx.hi] + gy0 * cx.frac;
                plane[ry.hi * s.w + cx.lo] = plane[ry.hi * s.w + cx.lo] + gy1 * w0;
                plane[ry.hi * s.w + cx.hi] = plane[ry.hi * s.w + cx.hi] + gy1 * cx.frac;
            }
        }
    }
    Tensor::new(s, dx)
}

// ---------------------------------------------------------------------------
// Pooling and channel weighting

/// Mean over each `h x w` plane, accumulated in f64.
pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let s = input.shape();
    let inv = 1.0 / s.plane() as f64;
    let data = input
        .data()
        .chunks(s.plane())
        .map(|plane| T::from_f64_lossy(plane.iter().map(|v| v.as_f64()).sum::<f64>() * inv))
        .collect();
    Tensor::new(Shape::new(s.n, s.c, 1, 1), data).expect("pooled shape")
}

pub fn global_avg_pool_backward<T: Scalar>(input_shape: Shape, grad_out: &Tensor<T>) -> Tensor<T> {
    let inv = T::from_f64_lossy(1.0 / input_shape.plane() as f64);
    let mut data = Vec::with_capacity(input_shape.numel());
    for &g in grad_out.data() {
        data.extend(std::iter::repeat_n(g * inv, input_shape.plane()));
    }
    Tensor::new(input_shape, data).expect("pool backward shape")
}

/// First member of the two-way softmax `e^a / (e^a + e^b)`, evaluated as the
/// logistic of `a - b` and kept inside `[eps, 1 - eps]` so that both members
/// stay strictly positive.
pub fn softmax_first<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("softmax_pair", a, b)?;
    let eps = T::epsilon();
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| sigmoid(x - y).max(eps).min(T::one() - eps))
        .collect();
    Tensor::new(a.shape(), data)
}

/// Multiplies every `h x w` plane by the matching entry of an `(n, c, 1, 1)`
/// scale tensor.
pub fn scale_by_channel<T: Scalar>(input: &Tensor<T>, scale: &Tensor<T>) -> Result<Tensor<T>> {
    let s = input.shape();
    if scale.shape() != Shape::new(s.n, s.c, 1, 1) {
        return Err(Error::ShapeMismatch {
            op: "scale_by_channel",
            left: s,
            right: scale.shape(),
        });
    }
    let mut data = Vec::with_capacity(s.numel());
    for (plane, &k) in input.data().chunks(s.plane()).zip(scale.data()) {
        data.extend(plane.iter().map(|&v| v * k));
    }
    Tensor::new(s, data)
}

pub fn zip_with<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    same_shape(op, a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape(), data)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with("add", a, b, |x, y| x + y)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with("subtract", a, b, |x, y| x - y)
}

// ---------------------------------------------------------------------------
// Reductions

/// Mean squared difference accumulated in f64.
pub fn mse<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    same_shape("mse", x, y)?;
    let sum: f64 = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum();
    Ok(sum / x.numel() as f64)
}

// ---------------------------------------------------------------------------
// Fixed stencils

/// 4-neighbour Laplacian (`up + down + left + right - 4 * centre`) applied to
/// every plane with zero padding. The stencil is symmetric, so this operator is
/// its own adjoint.
pub fn laplacian<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let s = input.shape();
    let four = T::from_f64_lossy(4.0);
    let mut out = Vec::with_capacity(s.numel());
    for plane in input.data().chunks(s.plane()) {
        let at = |y: isize, x: isize| {
            if y < 0 || x < 0 || y >= s.h as isize || x >= s.w as isize {
                T::zero()
            } else {
                plane[y as usize * s.w + x as usize]
            }
        };
        for y in 0..s.h as isize {
            for x in 0..s.w as isize {
                out.push(
                    at(y - 1, x) + at(y + 1, x) + at(y, x - 1) + at(y, x + 1) - four * at(y, x),
                );
            }
        }
    }
    Tensor::new(s, out).expect("laplacian shape")
}

// ---------------------------------------------------------------------------
// Soft histogram

/// Value range for one sample's histogram; `None` means the range collapsed
/// and the sample contributes an all-zero histogram.
pub type HistRange<T> = Option<(T, T)>;

fn hist_position<T: Scalar>(x: T, lo: T, hi: T, bins: usize) -> (usize, T) {
    let last = T::from_usize(bins - 1).expect("bin count");
    let t = ((x - lo) / (hi - lo) * last).max(T::zero()).min(last);
    let k = t.floor().to_usize().unwrap_or(0).min(bins - 2);
    (k, t - T::from_usize(k).expect("bin index"))
}

/// Per-sample histogram with `bins` centres spaced uniformly on `[lo, hi]`.
///
/// Each value adds `1 - f` to its lower neighbouring centre and `f` to the
/// upper one, where `f` is its fractional position between them. Output shape
/// is `(n, 1, 1, bins)`.
pub fn soft_histogram<T: Scalar>(
    input: &Tensor<T>,
    bins: usize,
    ranges: &[HistRange<T>],
) -> Result<Tensor<T>> {
    let s = input.shape();
    if bins < 2 {
        return Err(Error::invalid("soft_histogram", "need at least two bins"));
    }
    if ranges.len() != s.n {
        return Err(Error::invalid(
            "soft_histogram",
            format!("{} ranges for batch of {}", ranges.len(), s.n),
        ));
    }
    let mut out = vec![T::zero(); s.n * bins];
    for (n, range) in ranges.iter().enumerate() {
        let Some((lo, hi)) = *range else { continue };
        let hist = &mut out[n * bins..(n + 1) * bins];
        for &x in input.sample(n) {
            let (k, f) = hist_position(x, lo, hi, bins);
            hist[k] = hist[k] + (T::one() - f);
            hist[k + 1] = hist[k + 1] + f;
        }
    }
    Tensor::new(Shape::new(s.n, 1, 1, bins), out)
}

pub fn soft_histogram_backward<T: Scalar>(
    input: &Tensor<T>,
    bins: usize,
    ranges: &[HistRange<T>],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let s = input.shape();
    let last = T::from_usize(bins - 1).expect("bin count");
    let mut dx = Vec::with_capacity(s.numel());
    for (n, range) in ranges.iter().enumerate() {
        let Some((lo, hi)) = *range else {
            dx.extend(std::iter::repeat_n(T::zero(), s.sample()));
            continue;
        };
        let g = &grad_out.data()[n * bins..(n + 1) * bins];
        let scale = last / (hi - lo);
        for &x in input.sample(n) {
            let (k, _) = hist_position(x, lo, hi, bins);
            dx.push((g[k + 1] - g[k]) * scale);
        }
    }
    Tensor::new(s, dx).expect("histogram backward shape")
}
