//! Training objective terms and image quality metrics.

use serde::{Deserialize, Serialize};

use crate::attenuation::{gradient_magnitude, percentile_normalize};
use crate::diff::{color_const, scalar_const, Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::field::{ColorField, ScalarField};

pub const PSNR_CAP: f64 = 100.0;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_TAPS: usize = 11;
/// SSIM share of the basic reconstruction loss.
pub const LAMBDA_DSSIM: f64 = 0.2;
const MS_SCALES: [usize; 2] = [2, 4];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Term weights for basic, ab, wat, edge, ms.
    pub w: [f64; 5],
    pub mu: f64,
    pub lambda_edge: f64,
    pub alpha_s: f64,
    pub lambda_ms: f64,
    pub gamma_wat: f64,
    /// `alpha(w)` at `w = 0` and `w = 1`.
    pub alpha_end: [f64; 2],
    /// `beta(w)` at `w = 0` and `w = 1`.
    pub beta_end: [f64; 2],
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w: [1.0, 0.05, 0.05, 0.01, 0.2],
            mu: 1.0,
            lambda_edge: 0.1,
            alpha_s: 10.0,
            lambda_ms: 0.5,
            gamma_wat: 1.0,
            alpha_end: [1.2, 0.8],
            beta_end: [0.8, 1.2],
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let scalars = [self.mu, self.lambda_edge, self.alpha_s, self.lambda_ms, self.gamma_wat];
        let mut all = self.w.iter().chain(&scalars).chain(&self.alpha_end).chain(&self.beta_end);
        if all.any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(invalid("loss weights must be finite and non-negative"));
        }
        Ok(())
    }

    /// Attenuation and scattering coefficients `(alpha(w), beta(w))`.
    pub fn path_coefficients(&self, w: f64) -> (f64, f64) {
        let w = clamp_index(w);
        let lerp = |e: [f64; 2]| (1.0 - w) * e[0] + w * e[1];
        (lerp(self.alpha_end), lerp(self.beta_end))
    }
}

fn clamp_index(w: f64) -> f64 {
    if !(0.0..=1.0).contains(&w) {
        log::warn!("water index {w} outside [0, 1], clamped");
    }
    w.clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub basic: f64,
    pub ab: f64,
    pub wat: f64,
    pub edge: f64,
    pub ms: f64,
    pub total: f64,
    pub attenuation: f64,
    pub scattering: f64,
}

impl LossBreakdown {
    pub fn parts(&self) -> [f64; 5] {
        [self.basic, self.ab, self.wat, self.edge, self.ms]
    }
}

fn check_dims(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a != b {
        return Err(invalid(format!("{what}: dims {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Normalized Gaussian taps of the SSIM window.
pub fn ssim_taps() -> Vec<f64> {
    let r = (SSIM_TAPS / 2) as f64;
    let raw: Vec<f64> = (0..SSIM_TAPS).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

pub fn l1_var(t: &mut Tape, a: Var, b: Var) -> Var {
    let d = t.sub(a, b);
    let d = t.abs(d);
    t.mean(d)
}

pub fn mse_var(t: &mut Tape, a: Var, b: Var) -> Var {
    let d = t.sub(a, b);
    let d = t.square(d);
    t.mean(d)
}

/// Mean SSIM over pixels and channels.
pub fn ssim_var(t: &mut Tape, x: Var, y: Var) -> Var {
    let taps = ssim_taps();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mx = t.separable_blur(x, &taps);
    let my = t.separable_blur(y, &taps);
    let xx = t.square(x);
    let yy = t.square(y);
    let xy = t.mul(x, y);
    let bxx = t.separable_blur(xx, &taps);
    let byy = t.separable_blur(yy, &taps);
    let bxy = t.separable_blur(xy, &taps);
    let mx2 = t.square(mx);
    let my2 = t.square(my);
    let mxy = t.mul(mx, my);
    let sx = t.sub(bxx, mx2);
    let sy = t.sub(byy, my2);
    let sxy = t.sub(bxy, mxy);
    let n1 = t.scale(mxy, 2.0);
    let n1 = t.offset(n1, c1);
    let n2 = t.scale(sxy, 2.0);
    let n2 = t.offset(n2, c2);
    let d1 = t.add(mx2, my2);
    let d1 = t.offset(d1, c1);
    let d2 = t.add(sx, sy);
    let d2 = t.offset(d2, c2);
    let num = t.mul(n1, n2);
    let den = t.mul(d1, d2);
    let map = t.div(num, den);
    t.mean(map)
}

/// `(1 - l) L1 + l (1 - SSIM) / 2` with `l = LAMBDA_DSSIM`.
pub fn l_basic_var(t: &mut Tape, o: Var, target: Var) -> Var {
    let l1 = l1_var(t, o, target);
    let s = ssim_var(t, o, target);
    let ds = t.rsub(1.0, s);
    let ds = t.scale(ds, 0.5 * LAMBDA_DSSIM);
    let l1 = t.scale(l1, 1.0 - LAMBDA_DSSIM);
    t.add(l1, ds)
}

/// `mean(B_s D) - mean(A D) + mu MSE(B_s + T_map, 1)` on depth already
/// divided by the far plane.
pub fn l_ab_var(t: &mut Tape, b_s: Var, a: Var, depth_norm: Var, t_map: Var, mu: f64) -> Var {
    let bd = t.mul(b_s, depth_norm);
    let bd = t.mean(bd);
    let a_mean = t.mean_channels(a);
    let ad = t.mul(a_mean, depth_norm);
    let ad = t.mean(ad);
    let sum = t.add(b_s, t_map);
    let r = t.offset(sum, -1.0);
    let r = t.square(r);
    let m = t.mean(r);
    let m = t.scale(m, mu);
    let diff = t.sub(bd, ad);
    t.add(diff, m)
}

/// Per-pixel `|d/dx| + |d/dy|` using Sobel kernels scaled to unit slope.
fn abs_gradient(t: &mut Tape, f: Var) -> Var {
    let gx = t.sobel_x(f);
    let gy = t.sobel_y(f);
    let gx = t.abs(gx);
    let gy = t.abs(gy);
    let s = t.add(gx, gy);
    t.scale(s, 1.0 / 8.0)
}

/// Edge-weighted magnitude plus edge-aware smoothness of `B_s`.
pub fn l_edge_var(t: &mut Tape, b_s: Var, depth: Var, lambda_edge: f64, alpha_s: f64) -> Var {
    let gm = gradient_magnitude(t, depth);
    let w_edge = percentile_normalize(t, gm);
    let we = t.mul(b_s, w_edge);
    let we = t.abs(we);
    let first = t.mean(we);
    let gd = abs_gradient(t, depth);
    let w_smooth = t.scale(gd, -alpha_s);
    let w_smooth = t.exp(w_smooth);
    let gb = abs_gradient(t, b_s);
    let smooth = t.mul(w_smooth, gb);
    let smooth = t.mean(smooth);
    let smooth = t.scale(smooth, lambda_edge);
    t.add(first, smooth)
}

/// Full-resolution L1 plus the mean L1 over the 1/2 and 1/4 levels weighted by `lambda_ms`.
pub fn l_ms_var(t: &mut Tape, o: Var, target: Var, lambda_ms: f64) -> Var {
    let mut total = l1_var(t, o, target);
    for s in MS_SCALES {
        let od = t.downsample(o, s);
        let td = t.downsample(target, s);
        let l = l1_var(t, od, td);
        let l = t.scale(l, lambda_ms / MS_SCALES.len() as f64);
        total = t.add(total, l);
    }
    total
}

/// Path-isolated reconstruction losses `(L_att, L_sca)`. `frozen` supplies the
/// stopped `(direct, backscatter)` values; by default they are detached copies.
pub fn path_losses_var(t: &mut Tape, direct: Var, backscatter: Var, target: Var, frozen: Option<(Var, Var)>) -> (Var, Var) {
    let (d_stop, b_stop) = match frozen {
        Some(f) => f,
        None => (t.detach(direct), t.detach(backscatter)),
    };
    let att_img = t.add(direct, b_stop);
    let l_att = l_basic_var(t, att_img, target);
    let sca_img = t.add(d_stop, backscatter);
    let l_sca = l_basic_var(t, sca_img, target);
    (l_att, l_sca)
}

pub fn l_wat_var(t: &mut Tape, l_att: Var, l_sca: Var, l_ab: Var, w: f64, weights: &LossWeights) -> Var {
    let (alpha, beta) = weights.path_coefficients(w);
    let a = t.scale(l_att, alpha);
    let b = t.scale(l_sca, beta);
    let c = t.scale(l_ab, weights.gamma_wat);
    let s = t.add(a, b);
    t.add(s, c)
}

/// Image-formation quantities the physics-phase objective consumes.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveInputs {
    /// Restored scene radiance `[3,h,w]`.
    pub j_hat: Var,
    /// Attenuation `[3,h,w]`.
    pub attenuation: Var,
    /// Backscatter `[3,h,w]`.
    pub backscatter: Var,
    /// Scattering opacity `[1,h,w]`.
    pub scatter_opacity: Var,
    /// Rendered depth `[1,h,w]`.
    pub depth: Var,
    /// Observed image `[3,h,w]`.
    pub target: Var,
    /// Stopped `(J A, B)` used by the path losses instead of detached copies.
    pub frozen: Option<(Var, Var)>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub basic: Var,
    pub ab: Var,
    pub wat: Var,
    pub edge: Var,
    pub ms: Var,
    pub total: Var,
    pub attenuation: Var,
    pub scattering: Var,
    /// Synthesized degraded image `J A + B`.
    pub degraded: Var,
}

impl LossVars {
    pub fn breakdown(&self, t: &Tape) -> LossBreakdown {
        LossBreakdown {
            basic: t.scalar_value(self.basic),
            ab: t.scalar_value(self.ab),
            wat: t.scalar_value(self.wat),
            edge: t.scalar_value(self.edge),
            ms: t.scalar_value(self.ms),
            total: t.scalar_value(self.total),
            attenuation: t.scalar_value(self.attenuation),
            scattering: t.scalar_value(self.scattering),
        }
    }
}

/// Weighted sum of all five terms on the synthesized image `J A + B`.
pub fn objective_var(t: &mut Tape, x: &ObjectiveInputs, w: f64, d_far: f64, weights: &LossWeights) -> LossVars {
    let direct = t.mul(x.j_hat, x.attenuation);
    let degraded = t.add(direct, x.backscatter);
    let basic = l_basic_var(t, degraded, x.target);
    let depth_norm = t.scale(x.depth, 1.0 / d_far);
    let t_map = t.mean_channels(x.attenuation);
    let ab = l_ab_var(t, x.scatter_opacity, x.attenuation, depth_norm, t_map, weights.mu);
    let (att, sca) = path_losses_var(t, direct, x.backscatter, x.target, x.frozen);
    let wat = l_wat_var(t, att, sca, ab, w, weights);
    let edge = l_edge_var(t, x.scatter_opacity, x.depth, weights.lambda_edge, weights.alpha_s);
    let ms = l_ms_var(t, degraded, x.target, weights.lambda_ms);
    let terms = [basic, ab, wat, edge, ms];
    let mut total = t.scale(terms[0], weights.w[0]);
    for (v, k) in terms.iter().zip(weights.w).skip(1) {
        let s = t.scale(*v, k);
        total = t.add(total, s);
    }
    LossVars { basic, ab, wat, edge, ms, total, attenuation: att, scattering: sca, degraded }
}

fn eval_pair(o: &ColorField, target: &ColorField, what: &str, f: impl FnOnce(&mut Tape, Var, Var) -> Var) -> Result<f64> {
    check_dims(o.dims(), target.dims(), what)?;
    let mut t = Tape::new();
    let a = color_const(&mut t, o);
    let b = color_const(&mut t, target);
    let v = f(&mut t, a, b);
    Ok(t.scalar_value(v))
}

pub fn l_basic(o: &ColorField, target: &ColorField) -> Result<f64> {
    eval_pair(o, target, "l_basic", l_basic_var)
}

pub fn l_ms(o: &ColorField, target: &ColorField, lambda_ms: f64) -> Result<f64> {
    eval_pair(o, target, "l_ms", |t, a, b| l_ms_var(t, a, b, lambda_ms))
}

pub fn ssim(o: &ColorField, target: &ColorField) -> Result<f64> {
    eval_pair(o, target, "ssim", ssim_var)
}

pub fn psnr(o: &ColorField, target: &ColorField) -> Result<f64> {
    check_dims(o.dims(), target.dims(), "psnr")?;
    let sq: Vec<f64> = o.data.iter().zip(&target.data).map(|(a, b)| (a - b) * (a - b)).collect();
    let mse = crate::field::pairwise_sum(&sq) / sq.len().max(1) as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < 1e-10 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// Consistency loss. `depth` is divided by `d_far` before the expectations.
pub fn l_ab(b_s: &ScalarField, a: &ColorField, depth: &ScalarField, t_map: &ScalarField, mu: f64, d_far: f64) -> Result<f64> {
    for (d, what) in [(a.dims(), "A"), (depth.dims(), "D"), (t_map.dims(), "T_map")] {
        check_dims(b_s.dims(), d, &format!("l_ab: B_s vs {what}"))?;
    }
    let mut t = Tape::new();
    let bs = scalar_const(&mut t, b_s);
    let av = color_const(&mut t, a);
    let d = scalar_const(&mut t, depth);
    let d = t.scale(d, 1.0 / d_far);
    let tm = scalar_const(&mut t, t_map);
    let v = l_ab_var(&mut t, bs, av, d, tm, mu);
    Ok(t.scalar_value(v))
}

pub fn l_edge(b_s: &ScalarField, depth: &ScalarField, lambda_edge: f64, alpha_s: f64) -> Result<f64> {
    check_dims(b_s.dims(), depth.dims(), "l_edge")?;
    if depth.width < 3 || depth.height < 3 {
        return Err(invalid("l_edge needs at least 3x3 fields"));
    }
    let mut t = Tape::new();
    let bs = scalar_const(&mut t, b_s);
    let d = scalar_const(&mut t, depth);
    let v = l_edge_var(&mut t, bs, d, lambda_edge, alpha_s);
    Ok(t.scalar_value(v))
}

pub fn l_wat(l_att: f64, l_sca: f64, l_ab_val: f64, w: f64, weights: &LossWeights) -> f64 {
    let (alpha, beta) = weights.path_coefficients(w);
    alpha * l_att + beta * l_sca + weights.gamma_wat * l_ab_val
}

/// Weighted sum of the five terms; rejects non-finite parts.
pub fn l_total(parts: &LossBreakdown, weights: &LossWeights) -> Result<f64> {
    let p = parts.parts();
    if let Some(i) = p.iter().position(|v| !v.is_finite()) {
        return Err(Error::Diverged(format!("loss term {i} is {}", p[i])));
    }
    Ok(p.iter().zip(weights.w).map(|(v, k)| v * k).sum())
}
