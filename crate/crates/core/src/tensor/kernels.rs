//! Forward and backward kernels for the heavier tensor operations.

use rayon::prelude::*;

use super::{Float, Tensor};
use crate::error::{shape_err, Result};

pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    /// A 1×1 kernel at stride 1 without padding needs no unfolding.
    fn direct(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

pub(crate) fn conv_geometry(
    input: &[usize],
    weight: &[usize],
    bias: Option<&[usize]>,
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    let (n, cin, h, w) = match *input {
        [n, c, h, w] => (n, c, h, w),
        _ => return shape_err("conv2d", format!("input must be N×C×H×W, got {input:?}")),
    };
    let (cout, wcin, kh, kw) = match *weight {
        [a, b, c, d] => (a, b, c, d),
        _ => return shape_err("conv2d", format!("weight must be Cout×Cin×k×k, got {weight:?}")),
    };
    if wcin != cin {
        return shape_err(
            "conv2d",
            format!("input has {cin} channels, weight expects {wcin}"),
        );
    }
    if kh != kw || kh % 2 == 0 {
        return shape_err("conv2d", format!("kernel must be square and odd, got {kh}×{kw}"));
    }
    if stride == 0 {
        return shape_err("conv2d", "stride must be positive");
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return shape_err(
            "conv2d",
            format!("{h}×{w} input with padding {pad} is smaller than kernel {kh}"),
        );
    }
    if let Some(b) = bias {
        if b != [cout] {
            return shape_err("conv2d", format!("bias must be [{cout}], got {b:?}"));
        }
    }
    Ok(ConvGeom {
        n,
        cin,
        h,
        w,
        cout,
        k: kh,
        stride,
        pad,
        oh: (h + 2 * pad - kh) / stride + 1,
        ow: (w + 2 * pad - kw) / stride + 1,
    })
}

fn im2col<T: Float>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let p = g.col_cols();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Float>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let p = g.col_cols();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation (no kernel flip) of an `N×Cin×H×W` input with a
/// `Cout×Cin×k×k` kernel.
pub fn conv2d<T: Float>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = conv_geometry(
        input.shape(),
        weight.shape(),
        bias.map(|b| b.shape()),
        stride,
        pad,
    )?;
    let (kk, p) = (g.col_rows(), g.col_cols());
    let in_per = g.cin * g.h * g.w;
    let mut out = vec![T::zero(); g.n * g.cout * p];
    let wdata = weight.data();
    out.par_chunks_mut(g.cout * p)
        .enumerate()
        .for_each(|(ni, out_n)| {
            let x_n = &input.data()[ni * in_per..(ni + 1) * in_per];
            let mut scratch = Vec::new();
            let col: &[T] = if g.direct() {
                x_n
            } else {
                scratch.resize(kk * p, T::zero());
                im2col(&g, x_n, &mut scratch);
                &scratch
            };
            T::gemm(
                g.cout,
                kk,
                p,
                T::one(),
                wdata,
                kk as isize,
                1,
                col,
                p as isize,
                1,
                T::zero(),
                out_n,
                p as isize,
                1,
            );
            if let Some(b) = bias {
                for (co, plane) in out_n.chunks_mut(p).enumerate() {
                    let bv = b.data()[co];
                    plane.iter_mut().for_each(|v| *v += bv);
                }
            }
        });
    Tensor::new(&[g.n, g.cout, g.oh, g.ow], out)
}

pub(crate) struct ConvGrads<T: Float> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub(crate) fn conv2d_backward<T: Float>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
    grad_out: &Tensor<T>,
    need: [bool; 3],
) -> Result<ConvGrads<T>> {
    let g = conv_geometry(input.shape(), weight.shape(), None, stride, pad)?;
    let (kk, p) = (g.col_rows(), g.col_cols());
    let in_per = g.cin * g.h * g.w;
    let out_per = g.cout * p;
    let go = grad_out.data();

    let weight_grad = need[1].then(|| {
        let mut dw = vec![T::zero(); g.cout * kk];
        let mut scratch = vec![T::zero(); if g.direct() { 0 } else { kk * p }];
        for ni in 0..g.n {
            let x_n = &input.data()[ni * in_per..(ni + 1) * in_per];
            let col: &[T] = if g.direct() {
                x_n
            } else {
                im2col(&g, x_n, &mut scratch);
                &scratch
            };
            // dW += dOut_n · col_nᵀ
            T::gemm(
                g.cout,
                p,
                kk,
                T::one(),
                &go[ni * out_per..(ni + 1) * out_per],
                p as isize,
                1,
                col,
                1,
                p as isize,
                T::one(),
                &mut dw,
                kk as isize,
                1,
            );
        }
        dw
    });

    let bias_grad = need[2].then(|| {
        let mut db = vec![T::zero(); g.cout];
        for ni in 0..g.n {
            for (co, acc) in db.iter_mut().enumerate() {
                let s = (ni * g.cout + co) * p;
                *acc += go[s..s + p].iter().copied().sum::<T>();
            }
        }
        db
    });

    let input_grad = need[0].then(|| {
        let mut dx = vec![T::zero(); g.n * in_per];
        let wdata = weight.data();
        dx.par_chunks_mut(in_per).enumerate().for_each(|(ni, dx_n)| {
            let go_n = &go[ni * out_per..(ni + 1) * out_per];
            if g.direct() {
                // dx_n = Wᵀ · dOut_n
                T::gemm(
                    kk, g.cout, p, T::one(), wdata, 1, kk as isize, go_n, p as isize, 1,
                    T::zero(), dx_n, p as isize, 1,
                );
            } else {
                let mut dcol = vec![T::zero(); kk * p];
                T::gemm(
                    kk, g.cout, p, T::one(), wdata, 1, kk as isize, go_n, p as isize, 1,
                    T::zero(), &mut dcol, p as isize, 1,
                );
                col2im(&g, &dcol, dx_n);
            }
        });
        dx
    });

    Ok(ConvGrads {
        input: input_grad
            .map(|d| Tensor::new(input.shape(), d))
            .transpose()?,
        weight: weight_grad
            .map(|d| Tensor::new(weight.shape(), d))
            .transpose()?,
        bias: bias_grad.map(|d| Tensor::new(&[g.cout], d)).transpose()?,
    })
}

/// Per-axis interpolation taps: `(i0, i1, w0, w1)` for every output index.
fn bilinear_taps<T: Float>(inp: usize, out: usize) -> Vec<(usize, usize, T, T)> {
    let scale = inp as f64 / out as f64;
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(inp - 1);
            let i1 = (i0 + 1).min(inp - 1);
            let frac = src - i0 as f64;
            (i0, i1, T::lit(1.0 - frac), T::lit(frac))
        })
        .collect()
}

fn resize_dims(input: &[usize], out_h: usize, out_w: usize, op: &'static str) -> Result<[usize; 4]> {
    if out_h == 0 || out_w == 0 {
        return shape_err(op, format!("output size {out_h}×{out_w} must be positive"));
    }
    match *input {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => shape_err(op, format!("input must be N×C×H×W, got {input:?}")),
    }
}

/// Bilinear resampling with half-pixel centers and edge clamping.
pub fn bilinear_resize<T: Float>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = resize_dims(input.shape(), out_h, out_w, "bilinear_resize")?;
    let ty = bilinear_taps::<T>(h, out_h);
    let tx = bilinear_taps::<T>(w, out_w);
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in input.data().chunks(h * w) {
        for &(y0, y1, wy0, wy1) in &ty {
            let r0 = &plane[y0 * w..(y0 + 1) * w];
            let r1 = &plane[y1 * w..(y1 + 1) * w];
            for &(x0, x1, wx0, wx1) in &tx {
                out.push(wy0 * (wx0 * r0[x0] + wx1 * r0[x1]) + wy1 * (wx0 * r1[x0] + wx1 * r1[x1]));
            }
        }
    }
    Tensor::new(&[n, c, out_h, out_w], out)
}

pub(crate) fn bilinear_resize_backward<T: Float>(
    in_shape: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (_, _, out_h, out_w) = grad_out.dims4()?;
    let [n, c, h, w] = resize_dims(in_shape, out_h, out_w, "bilinear_resize")?;
    let ty = bilinear_taps::<T>(h, out_h);
    let tx = bilinear_taps::<T>(w, out_w);
    let mut dx = vec![T::zero(); n * c * h * w];
    for (plane, gplane) in dx.chunks_mut(h * w).zip(grad_out.data().chunks(out_h * out_w)) {
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let gv = gplane[oy * out_w + ox];
                plane[y0 * w + x0] += gv * wy0 * wx0;
                plane[y0 * w + x1] += gv * wy0 * wx1;
                plane[y1 * w + x0] += gv * wy1 * wx0;
                plane[y1 * w + x1] += gv * wy1 * wx1;
            }
        }
    }
    Tensor::new(in_shape, dx)
}

fn nearest_taps(inp: usize, out: usize) -> Vec<usize> {
    (0..out)
        .map(|o| (((2 * o + 1) * inp) / (2 * out)).min(inp - 1))
        .collect()
}

/// Nearest-neighbour resampling: output pixel `o` reads source
/// `floor((o + 0.5) · in / out)`.
pub fn nearest_resize<T: Float>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = resize_dims(input.shape(), out_h, out_w, "nearest_resize")?;
    let ty = nearest_taps(h, out_h);
    let tx = nearest_taps(w, out_w);
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in input.data().chunks(h * w) {
        for &sy in &ty {
            let row = &plane[sy * w..(sy + 1) * w];
            out.extend(tx.iter().map(|&sx| row[sx]));
        }
    }
    Tensor::new(&[n, c, out_h, out_w], out)
}

pub(crate) fn nearest_resize_backward<T: Float>(
    in_shape: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (_, _, out_h, out_w) = grad_out.dims4()?;
    let [n, c, h, w] = resize_dims(in_shape, out_h, out_w, "nearest_resize")?;
    let ty = nearest_taps(h, out_h);
    let tx = nearest_taps(w, out_w);
    let mut dx = vec![T::zero(); n * c * h * w];
    for (plane, gplane) in dx.chunks_mut(h * w).zip(grad_out.data().chunks(out_h * out_w)) {
        for (oy, &sy) in ty.iter().enumerate() {
            for (ox, &sx) in tx.iter().enumerate() {
                plane[sy * w + sx] += gplane[oy * out_w + ox];
            }
        }
    }
    Tensor::new(in_shape, dx)
}

/// Channel-axis log-softmax of an `N×C×H×W` tensor with max subtraction.
pub fn log_softmax<T: Float>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    let hw = h * w;
    let x = input.data();
    let mut out = vec![T::zero(); x.len()];
    for ni in 0..n {
        let base = ni * c * hw;
        for p in 0..hw {
            let at = |ci: usize| base + ci * hw + p;
            let max = (0..c).map(|ci| x[at(ci)]).fold(T::neg_infinity(), T::max);
            let lse = (0..c).map(|ci| (x[at(ci)] - max).exp()).sum::<T>().ln() + max;
            for ci in 0..c {
                out[at(ci)] = x[at(ci)] - lse;
            }
        }
    }
    Tensor::new(input.shape(), out)
}

pub(crate) fn log_softmax_backward<T: Float>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = output.dims4()?;
    let hw = h * w;
    let (y, gy) = (output.data(), grad_out.data());
    let mut dx = vec![T::zero(); y.len()];
    for ni in 0..n {
        let base = ni * c * hw;
        for p in 0..hw {
            let gsum: T = (0..c).map(|ci| gy[base + ci * hw + p]).sum();
            for ci in 0..c {
                let i = base + ci * hw + p;
                dx[i] = gy[i] - y[i].exp() * gsum;
            }
        }
    }
    Tensor::new(output.shape(), dx)
}

/// Statistics grouping for [`normalize_features`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Per channel over `N×H×W`.
    Batch,
    /// Per sample and channel over `H×W`.
    Instance,
}

/// Visits each normalization group as a list of contiguous `H×W` planes.
fn norm_groups(n: usize, c: usize, mode: NormMode) -> Vec<Vec<usize>> {
    match mode {
        NormMode::Batch => (0..c).map(|ci| (0..n).map(|ni| ni * c + ci).collect()).collect(),
        NormMode::Instance => (0..n * c).map(|p| vec![p]).collect(),
    }
}

/// Zero-mean, unit-variance normalization using `1/sqrt(var + eps)` with the
/// population variance. Returns the output and the per-group inverse std.
pub(crate) fn normalize_forward<T: Float>(
    input: &Tensor<T>,
    mode: NormMode,
    eps: T,
) -> Result<(Tensor<T>, Vec<T>)> {
    let (n, c, h, w) = input.dims4()?;
    let hw = h * w;
    let x = input.data();
    let mut out = vec![T::zero(); x.len()];
    let groups = norm_groups(n, c, mode);
    let mut inv_std = Vec::with_capacity(groups.len());
    for planes in &groups {
        let count = T::lit((planes.len() * hw) as f64);
        let mean = planes
            .iter()
            .map(|&p| x[p * hw..(p + 1) * hw].iter().copied().sum::<T>())
            .sum::<T>()
            / count;
        let var = planes
            .iter()
            .map(|&p| x[p * hw..(p + 1) * hw].iter().map(|&v| (v - mean) * (v - mean)).sum::<T>())
            .sum::<T>()
            / count;
        let r = T::one() / (var + eps).sqrt();
        for &p in planes {
            for i in p * hw..(p + 1) * hw {
                out[i] = (x[i] - mean) * r;
            }
        }
        inv_std.push(r);
    }
    Ok((Tensor::new(input.shape(), out)?, inv_std))
}

pub fn normalize_features<T: Float>(input: &Tensor<T>, mode: NormMode, eps: T) -> Result<Tensor<T>> {
    normalize_forward(input, mode, eps).map(|(y, _)| y)
}

pub(crate) fn normalize_backward<T: Float>(
    output: &Tensor<T>,
    inv_std: &[T],
    mode: NormMode,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = output.dims4()?;
    let hw = h * w;
    let (y, gy) = (output.data(), grad_out.data());
    let mut dx = vec![T::zero(); y.len()];
    for (planes, &r) in norm_groups(n, c, mode).iter().zip(inv_std) {
        let count = T::lit((planes.len() * hw) as f64);
        let mut mean_g = T::zero();
        let mut mean_gy = T::zero();
        for &p in planes {
            for i in p * hw..(p + 1) * hw {
                mean_g += gy[i];
                mean_gy += gy[i] * y[i];
            }
        }
        mean_g /= count;
        mean_gy /= count;
        for &p in planes {
            for i in p * hw..(p + 1) * hw {
                dx[i] = r * (gy[i] - mean_g - y[i] * mean_gy);
            }
        }
    }
    Tensor::new(output.shape(), dx)
}
