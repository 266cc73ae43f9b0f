//! Scalar and color grids plus the image-space primitives shared by the
//! physics modules: block-mean downsampling, bilinear upsampling and Sobel
//! gradients.
//!
//! The kernels at the bottom of this file work on planar `[c][h][w]` buffers
//! and come with their adjoints, so the tape ops in [`crate::diff`] reuse the
//! exact same arithmetic as the plain field functions.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Row-major single-channel grid (depth maps, modulators, masks).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarField {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

/// Row-major grid of linear-RGB triples, interleaved as `r, g, b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorField {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

/// One level of a depth pyramid.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidLevel {
    pub scale: usize,
    pub field: ScalarField,
}

impl ScalarField {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(invalid(format!(
                "scalar field {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("scalar field contains non-finite values"));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn mean(&self) -> f64 {
        pairwise_sum(&self.data) / self.data.len().max(1) as f64
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { width: self.width, height: self.height, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn transposed(&self) -> Self {
        Self::from_fn(self.height, self.width, |x, y| self.get(y, x))
    }
}

impl ColorField {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(invalid(format!(
                "color field {width}x{height} needs {} values, got {}",
                3 * width * height,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("color field contains non-finite values"));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * width * height);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * width * height);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Channel `c` as a scalar field.
    pub fn channel(&self, c: usize) -> ScalarField {
        ScalarField {
            width: self.width,
            height: self.height,
            data: self.data.iter().skip(c).step_by(3).copied().collect(),
        }
    }

    pub fn channel_means(&self) -> [f64; 3] {
        let n = self.pixel_count().max(1) as f64;
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let ch: Vec<f64> = self.data.iter().skip(c).step_by(3).copied().collect();
            *o = pairwise_sum(&ch) / n;
        }
        out
    }

    /// Rec. 709 luminance of linear RGB.
    pub fn luma(&self) -> ScalarField {
        ScalarField {
            width: self.width,
            height: self.height,
            data: self
                .data
                .chunks_exact(3)
                .map(|p| 0.2126 * p[0] + 0.7152 * p[1] + 0.0722 * p[2])
                .collect(),
        }
    }

    pub fn clamped(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { width: self.width, height: self.height, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Planar `[3][h][w]` copy of the data.
    pub fn to_planar(&self) -> Vec<f64> {
        let n = self.pixel_count();
        let mut out = vec![0.0; 3 * n];
        for (i, p) in self.data.chunks_exact(3).enumerate() {
            out[i] = p[0];
            out[n + i] = p[1];
            out[2 * n + i] = p[2];
        }
        out
    }

    pub fn from_planar(width: usize, height: usize, planar: &[f64]) -> Self {
        let n = width * height;
        assert_eq!(planar.len(), 3 * n, "planar buffer size mismatch");
        let mut data = Vec::with_capacity(3 * n);
        for i in 0..n {
            data.push(planar[i]);
            data.push(planar[n + i]);
            data.push(planar[2 * n + i]);
        }
        Self { width, height, data }
    }
}

/// Fields that the pyramid and filter operations accept.
pub trait Field: Sized {
    fn channels(&self) -> usize;
    fn width(&self) -> usize;
    fn height(&self) -> usize;
    fn planar(&self) -> Vec<f64>;
    fn from_planar_data(width: usize, height: usize, planar: Vec<f64>) -> Self;
}

impl Field for ScalarField {
    fn channels(&self) -> usize {
        1
    }
    fn width(&self) -> usize {
        self.width
    }
    fn height(&self) -> usize {
        self.height
    }
    fn planar(&self) -> Vec<f64> {
        self.data.clone()
    }
    fn from_planar_data(width: usize, height: usize, planar: Vec<f64>) -> Self {
        Self { width, height, data: planar }
    }
}

impl Field for ColorField {
    fn channels(&self) -> usize {
        3
    }
    fn width(&self) -> usize {
        self.width
    }
    fn height(&self) -> usize {
        self.height
    }
    fn planar(&self) -> Vec<f64> {
        self.to_planar()
    }
    fn from_planar_data(width: usize, height: usize, planar: Vec<f64>) -> Self {
        ColorField::from_planar(width, height, &planar)
    }
}

fn check_factor(factor: usize) -> Result<()> {
    if factor == 2 || factor == 4 {
        Ok(())
    } else {
        Err(invalid(format!("pyramid factor must be 2 or 4, got {factor}")))
    }
}

/// Block-mean downsampling with ceil sizing.
pub fn downsample<F: Field>(f: &F, factor: usize) -> Result<F> {
    check_factor(factor)?;
    let (out, oh, ow) = downsample_planes(&f.planar(), f.channels(), f.height(), f.width(), factor);
    Ok(F::from_planar_data(ow, oh, out))
}

/// Bilinear upsampling with edge clamping to explicit target dimensions.
pub fn upsample<F: Field>(f: &F, factor: usize, target_width: usize, target_height: usize) -> Result<F> {
    check_factor(factor)?;
    if target_width < f.width() || target_height < f.height() {
        return Err(invalid(format!(
            "upsample target {target_width}x{target_height} is smaller than input {}x{}",
            f.width(),
            f.height()
        )));
    }
    let out = upsample_planes(&f.planar(), f.channels(), f.height(), f.width(), factor, target_height, target_width);
    Ok(F::from_planar_data(target_width, target_height, out))
}

/// Depth pyramid at scales 1, 2 and 4.
pub fn pyramid(f: &ScalarField) -> Result<Vec<PyramidLevel>> {
    Ok(vec![
        PyramidLevel { scale: 1, field: f.clone() },
        PyramidLevel { scale: 2, field: downsample(f, 2)? },
        PyramidLevel { scale: 4, field: downsample(f, 4)? },
    ])
}

pub const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
pub const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

/// 3x3 Sobel responses with replicate padding; `gx` responds to change
/// along x (columns).
pub fn sobel_gradients(f: &ScalarField) -> Result<(ScalarField, ScalarField)> {
    if f.width < 3 || f.height < 3 {
        return Err(invalid(format!("sobel needs at least 3x3, got {}x{}", f.width, f.height)));
    }
    let gx = filter_planes(&f.data, 1, f.height, f.width, &SOBEL_X, 3, 3);
    let gy = filter_planes(&f.data, 1, f.height, f.width, &SOBEL_Y, 3, 3);
    Ok((
        ScalarField { width: f.width, height: f.height, data: gx },
        ScalarField { width: f.width, height: f.height, data: gy },
    ))
}

/// Fixed-tree pairwise summation; the result depends only on the slice.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const LEAF: usize = 64;
    if xs.len() <= LEAF {
        let mut s = 0.0;
        for &x in xs {
            s += x;
        }
        return s;
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

#[inline]
fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

pub(crate) fn downsample_dims(h: usize, w: usize, f: usize) -> (usize, usize) {
    (h.div_ceil(f), w.div_ceil(f))
}

pub(crate) fn downsample_planes(data: &[f64], c: usize, h: usize, w: usize, f: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = downsample_dims(h, w, f);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let src = &data[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            let y1 = ((oy + 1) * f).min(h);
            for ox in 0..ow {
                let x1 = ((ox + 1) * f).min(w);
                let mut s = 0.0;
                for y in oy * f..y1 {
                    for x in ox * f..x1 {
                        s += src[y * w + x];
                    }
                }
                let n = ((y1 - oy * f) * (x1 - ox * f)) as f64;
                out[ch * oh * ow + oy * ow + ox] = s / n;
            }
        }
    }
    (out, oh, ow)
}

/// Adjoint of [`downsample_planes`]: spreads each output gradient evenly
/// over its source block.
pub(crate) fn downsample_adjoint(grad: &[f64], c: usize, h: usize, w: usize, f: usize, acc: &mut [f64]) {
    let (oh, ow) = downsample_dims(h, w, f);
    for ch in 0..c {
        for oy in 0..oh {
            let y1 = ((oy + 1) * f).min(h);
            for ox in 0..ow {
                let x1 = ((ox + 1) * f).min(w);
                let n = ((y1 - oy * f) * (x1 - ox * f)) as f64;
                let g = grad[ch * oh * ow + oy * ow + ox] / n;
                for y in oy * f..y1 {
                    for x in ox * f..x1 {
                        acc[ch * h * w + y * w + x] += g;
                    }
                }
            }
        }
    }
}

/// Source taps for one output coordinate of bilinear upsampling.
#[inline]
fn bilinear_taps(o: usize, f: usize, n: usize) -> (usize, usize, f64) {
    let s = ((o as f64 + 0.5) / f as f64 - 0.5).clamp(0.0, (n - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, s - i0 as f64)
}

pub(crate) fn upsample_planes(
    data: &[f64],
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    th: usize,
    tw: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; c * th * tw];
    let xs: Vec<_> = (0..tw).map(|x| bilinear_taps(x, f, w)).collect();
    for ch in 0..c {
        let src = &data[ch * h * w..(ch + 1) * h * w];
        for y in 0..th {
            let (y0, y1, ty) = bilinear_taps(y, f, h);
            for (x, &(x0, x1, tx)) in xs.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
                let bot = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
                out[ch * th * tw + y * tw + x] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn upsample_adjoint(
    grad: &[f64],
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    th: usize,
    tw: usize,
    acc: &mut [f64],
) {
    let xs: Vec<_> = (0..tw).map(|x| bilinear_taps(x, f, w)).collect();
    for ch in 0..c {
        let dst = &mut acc[ch * h * w..(ch + 1) * h * w];
        for y in 0..th {
            let (y0, y1, ty) = bilinear_taps(y, f, h);
            for (x, &(x0, x1, tx)) in xs.iter().enumerate() {
                let g = grad[ch * th * tw + y * tw + x];
                dst[y0 * w + x0] += g * (1.0 - ty) * (1.0 - tx);
                dst[y0 * w + x1] += g * (1.0 - ty) * tx;
                dst[y1 * w + x0] += g * ty * (1.0 - tx);
                dst[y1 * w + x1] += g * ty * tx;
            }
        }
    }
}

/// Per-channel correlation with a `kh x kw` kernel (odd sizes), replicate
/// padding.
pub(crate) fn filter_planes(data: &[f64], c: usize, h: usize, w: usize, kernel: &[f64], kh: usize, kw: usize) -> Vec<f64> {
    let (ry, rx) = ((kh / 2) as isize, (kw / 2) as isize);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let src = &data[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for dy in 0..kh {
                    let sy = clamp_index(y as isize + dy as isize - ry, h);
                    for dx in 0..kw {
                        let k = kernel[dy * kw + dx];
                        if k != 0.0 {
                            let sx = clamp_index(x as isize + dx as isize - rx, w);
                            s += k * src[sy * w + sx];
                        }
                    }
                }
                out[ch * h * w + y * w + x] = s;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn filter_adjoint(grad: &[f64], c: usize, h: usize, w: usize, kernel: &[f64], kh: usize, kw: usize, acc: &mut [f64]) {
    let (ry, rx) = ((kh / 2) as isize, (kw / 2) as isize);
    for ch in 0..c {
        let dst = &mut acc[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let g = grad[ch * h * w + y * w + x];
                if g == 0.0 {
                    continue;
                }
                for dy in 0..kh {
                    let sy = clamp_index(y as isize + dy as isize - ry, h);
                    for dx in 0..kw {
                        let k = kernel[dy * kw + dx];
                        if k != 0.0 {
                            let sx = clamp_index(x as isize + dx as isize - rx, w);
                            dst[sy * w + sx] += k * g;
                        }
                    }
                }
            }
        }
    }
}
