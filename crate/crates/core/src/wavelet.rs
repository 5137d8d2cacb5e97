//! Single-level orthonormal 2-D Haar transforms.
//!
//! For a 2×2 block `[[a, b], [c, d]]`:
//!
//! ```text
//! LL = (a + b + c + d) / 2    LH = (a - b + c - d) / 2
//! HL = (a + b - c - d) / 2    HH = (a - b - c + d) / 2
//! ```
//!
//! Two layouts of the four subbands are supported. [`Arrangement::Channelwise`]
//! stacks them on the channel axis, subband-major (all LL channels, then all
//! LH, HL, HH), turning `N×c×h×w` into `N×4c×h/2×w/2`.
//! [`Arrangement::Spatial`] tiles them into quadrants of a tensor with the
//! input's shape: LL top-left, LH top-right, HL bottom-left, HH bottom-right.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Float, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arrangement {
    Channelwise,
    Spatial,
}

impl std::str::FromStr for Arrangement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "channelwise" => Ok(Self::Channelwise),
            "spatial" => Ok(Self::Spatial),
            other => Err(Error::Config(format!("unknown arrangement `{other}`"))),
        }
    }
}

impl std::fmt::Display for Arrangement {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Channelwise => "channelwise",
            Self::Spatial => "spatial",
        })
    }
}

/// Subband order used for channel grouping and quadrant placement.
pub const SUBBANDS: [&str; 4] = ["LL", "LH", "HL", "HH"];

fn even_dims<T: Float>(x: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return shape_err(op, format!("spatial extent {h}×{w} must be even"));
    }
    Ok((n, c, h, w))
}

#[inline]
fn analyze<T: Float>(a: T, b: T, c: T, d: T) -> [T; 4] {
    let half = T::lit(0.5);
    [
        (a + b + c + d) * half,
        (a - b + c - d) * half,
        (a + b - c - d) * half,
        (a - b - c + d) * half,
    ]
}

#[inline]
fn synthesize<T: Float>(ll: T, lh: T, hl: T, hh: T) -> [T; 4] {
    let half = T::lit(0.5);
    [
        (ll + lh + hl + hh) * half,
        (ll - lh + hl - hh) * half,
        (ll + lh - hl - hh) * half,
        (ll - lh - hl + hh) * half,
    ]
}

/// Index of subband `s` of source channel `k` at half-resolution `(y, x)`,
/// within one sample, for each arrangement.
#[inline]
fn coeff_index(arr: Arrangement, c: usize, h2: usize, w2: usize, s: usize, k: usize, y: usize, x: usize) -> usize {
    match arr {
        Arrangement::Channelwise => ((s * c + k) * h2 + y) * w2 + x,
        Arrangement::Spatial => {
            let (qy, qx) = (s >> 1, s & 1);
            (k * 2 * h2 + qy * h2 + y) * (2 * w2) + qx * w2 + x
        }
    }
}

fn coeff_shape(arr: Arrangement, n: usize, c: usize, h: usize, w: usize) -> [usize; 4] {
    match arr {
        Arrangement::Channelwise => [n, 4 * c, h / 2, w / 2],
        Arrangement::Spatial => [n, c, h, w],
    }
}

/// Forward transform of an `N×c×h×w` tensor with even `h`, `w`.
pub fn dwt<T: Float>(x: &Tensor<T>, arr: Arrangement) -> Result<Tensor<T>> {
    let (n, c, h, w) = even_dims(x, "dwt")?;
    let (h2, w2) = (h / 2, w / 2);
    let per = c * h * w;
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for ni in 0..n {
        let xs = &src[ni * per..(ni + 1) * per];
        let os = &mut out[ni * per..(ni + 1) * per];
        for k in 0..c {
            let plane = &xs[k * h * w..(k + 1) * h * w];
            for y in 0..h2 {
                for xx in 0..w2 {
                    let i = 2 * y * w + 2 * xx;
                    let bands = analyze(plane[i], plane[i + 1], plane[i + w], plane[i + w + 1]);
                    for (s, v) in bands.into_iter().enumerate() {
                        os[coeff_index(arr, c, h2, w2, s, k, y, xx)] = v;
                    }
                }
            }
        }
    }
    Tensor::new(&coeff_shape(arr, n, c, h, w), out)
}

/// Source-domain extents `(n, c, h, w)` for a coefficient tensor.
fn source_dims<T: Float>(coeffs: &Tensor<T>, arr: Arrangement) -> Result<(usize, usize, usize, usize)> {
    let (n, ch, h, w) = coeffs.dims4()?;
    match arr {
        Arrangement::Channelwise => {
            if ch % 4 != 0 {
                return shape_err("iwt", format!("{ch} channels is not a multiple of 4"));
            }
            Ok((n, ch / 4, 2 * h, 2 * w))
        }
        Arrangement::Spatial => {
            if h % 2 != 0 || w % 2 != 0 {
                return shape_err("iwt", format!("spatial extent {h}×{w} must be even"));
            }
            Ok((n, ch, h, w))
        }
    }
}

/// Exact inverse of [`dwt`] for the same arrangement.
pub fn iwt<T: Float>(coeffs: &Tensor<T>, arr: Arrangement) -> Result<Tensor<T>> {
    let (n, c, h, w) = source_dims(coeffs, arr)?;
    let (h2, w2) = (h / 2, w / 2);
    let per = c * h * w;
    let src = coeffs.data();
    let mut out = vec![T::zero(); src.len()];
    for ni in 0..n {
        let cs = &src[ni * per..(ni + 1) * per];
        let os = &mut out[ni * per..(ni + 1) * per];
        for k in 0..c {
            let plane = &mut os[k * h * w..(k + 1) * h * w];
            for y in 0..h2 {
                for xx in 0..w2 {
                    let at = |s| cs[coeff_index(arr, c, h2, w2, s, k, y, xx)];
                    let [a, b, cc, d] = synthesize(at(0), at(1), at(2), at(3));
                    let i = 2 * y * w + 2 * xx;
                    plane[i] = a;
                    plane[i + 1] = b;
                    plane[i + w] = cc;
                    plane[i + w + 1] = d;
                }
            }
        }
    }
    Tensor::new(&[n, c, h, w], out)
}

/// Permutes coefficients between subband layouts.
pub fn rearrange<T: Float>(coeffs: &Tensor<T>, from: Arrangement, to: Arrangement) -> Result<Tensor<T>> {
    if from == to {
        return Ok(coeffs.clone());
    }
    let (n, c, h, w) = source_dims(coeffs, from)?;
    let (h2, w2) = (h / 2, w / 2);
    let per = c * h * w;
    let src = coeffs.data();
    let mut out = vec![T::zero(); src.len()];
    for ni in 0..n {
        let base = ni * per;
        for s in 0..4 {
            for k in 0..c {
                for y in 0..h2 {
                    for x in 0..w2 {
                        out[base + coeff_index(to, c, h2, w2, s, k, y, x)] =
                            src[base + coeff_index(from, c, h2, w2, s, k, y, x)];
                    }
                }
            }
        }
    }
    Tensor::new(&coeff_shape(to, n, c, h, w), out)
}

pub fn dwt_channelwise<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    dwt(x, Arrangement::Channelwise)
}

pub fn iwt_channelwise<T: Float>(w: &Tensor<T>) -> Result<Tensor<T>> {
    iwt(w, Arrangement::Channelwise)
}

pub fn dwt_spatial<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    dwt(x, Arrangement::Spatial)
}

pub fn iwt_spatial<T: Float>(w: &Tensor<T>) -> Result<Tensor<T>> {
    iwt(w, Arrangement::Spatial)
}

/// Extracts subband `s` (index into [`SUBBANDS`]) as an `N×c×h/2×w/2` tensor.
pub fn subband<T: Float>(coeffs: &Tensor<T>, arr: Arrangement, s: usize) -> Result<Tensor<T>> {
    if s >= 4 {
        return Err(Error::Invalid(format!("subband index {s} out of range")));
    }
    let channelwise = rearrange(coeffs, arr, Arrangement::Channelwise)?;
    let (n, ch, h2, w2) = channelwise.dims4()?;
    let c = ch / 4;
    let plane = c * h2 * w2;
    let mut data = Vec::with_capacity(n * plane);
    for ni in 0..n {
        let start = ni * ch * h2 * w2 + s * plane;
        data.extend_from_slice(&channelwise.data()[start..start + plane]);
    }
    Tensor::new(&[n, c, h2, w2], data)
}

/// Wavelet coefficients on a tape, tagged with their subband layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WaveletFeatures {
    pub var: Var,
    pub arrangement: Arrangement,
    /// Channel count of the spatial-domain signal these coefficients encode.
    pub source_channels: usize,
}

impl WaveletFeatures {
    /// Wraps an existing coefficient tensor, checking it fits the layout.
    pub fn wrap<T: Float>(tape: &Tape<T>, var: Var, arrangement: Arrangement) -> Result<Self> {
        let (_, c, _, _) = source_dims(tape.value(var), arrangement)?;
        Ok(Self {
            var,
            arrangement,
            source_channels: c,
        })
    }

    pub fn analyze<T: Float>(tape: &mut Tape<T>, x: Var, arrangement: Arrangement) -> Result<Self> {
        let source_channels = tape.value(x).dims4()?.1;
        let var = tape.dwt(x, arrangement)?;
        Ok(Self {
            var,
            arrangement,
            source_channels,
        })
    }

    pub fn synthesize<T: Float>(self, tape: &mut Tape<T>) -> Result<Var> {
        tape.iwt(self.var, self.arrangement)
    }

    /// Like [`WaveletFeatures::synthesize`], but fails unless the layout is `expected`.
    pub fn synthesize_as<T: Float>(self, tape: &mut Tape<T>, expected: Arrangement) -> Result<Var> {
        if self.arrangement != expected {
            return Err(Error::Arrangement {
                expected,
                got: self.arrangement,
            });
        }
        self.synthesize(tape)
    }

    pub fn arrange<T: Float>(self, tape: &mut Tape<T>, target: Arrangement) -> Result<Self> {
        if target == self.arrangement {
            return Ok(self);
        }
        let var = tape.arrange(self.var, self.arrangement, target)?;
        Ok(Self {
            var,
            arrangement: target,
            ..self
        })
    }

    /// Coefficient-grid resolution `(h, w)` of the stored tensor.
    pub fn grid<T: Float>(&self, tape: &Tape<T>) -> (usize, usize) {
        let s = tape.shape(self.var);
        (s[2], s[3])
    }

    /// Resolution of the encoded spatial-domain signal.
    pub fn source_size<T: Float>(&self, tape: &Tape<T>) -> (usize, usize) {
        let (h, w) = self.grid(tape);
        match self.arrangement {
            Arrangement::Channelwise => (2 * h, 2 * w),
            Arrangement::Spatial => (h, w),
        }
    }
}
