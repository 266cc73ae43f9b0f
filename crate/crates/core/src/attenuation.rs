//! RGB-guided wavelength-selective attenuation.
//!
//! `A_c = exp(-w_c * beta_c * (1 - gamma * E) * t_mod * D)` with
//! `beta_c = softplus(theta_c)` and `E` the edge factor built from luminance
//! and depth gradients.

use serde::{Deserialize, Serialize};

use crate::diff::{color_const, scalar_const, softplus, softplus_inv, to_color_field, to_scalar_field, ParamVars, ParamVector, Shape, Tape, Var};
use crate::error::{invalid, Result};
use crate::field::{ColorField, ScalarField};

pub const SLOT_W: &str = "attenuation/w_c";
pub const SLOT_THETA_BETA: &str = "attenuation/theta_beta";
pub const SLOT_GAMMA: &str = "attenuation/gamma";

/// Smoothing of the gradient magnitude at zero, keeps it differentiable.
pub(crate) const MAGNITUDE_EPS: f64 = 1e-6;
/// Added to the percentile normalizer.
pub(crate) const NORMALIZER_EPS: f64 = 1e-6;
pub(crate) const NORMALIZER_QUANTILE: f64 = 0.95;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttenuationParams {
    pub w_c: [f64; 3],
    pub theta_beta: [f64; 3],
    pub gamma: f64,
}

impl Default for AttenuationParams {
    /// Ocean-like ordering `beta_r > beta_g > beta_b`.
    fn default() -> Self {
        Self::from_beta([0.30, 0.12, 0.07], [1.0; 3], 0.5)
    }
}

impl AttenuationParams {
    pub fn from_beta(beta: [f64; 3], w_c: [f64; 3], gamma: f64) -> Self {
        Self { w_c, theta_beta: beta.map(softplus_inv), gamma }
    }

    pub fn beta(&self) -> [f64; 3] {
        self.theta_beta.map(softplus)
    }

    pub fn write(&self, p: &mut ParamVector) {
        p.insert(SLOT_W, Shape::vector(3), self.w_c.to_vec());
        p.insert(SLOT_THETA_BETA, Shape::vector(3), self.theta_beta.to_vec());
        p.insert(SLOT_GAMMA, Shape::scalar(), vec![self.gamma]);
    }

    pub fn read(p: &ParamVector) -> Result<Self> {
        let w = p.try_get(SLOT_W)?;
        let t = p.try_get(SLOT_THETA_BETA)?;
        Ok(Self { w_c: [w[0], w[1], w[2]], theta_beta: [t[0], t[1], t[2]], gamma: p.try_get(SLOT_GAMMA)?[0] })
    }

    pub fn to_params(&self) -> ParamVector {
        let mut p = ParamVector::new();
        self.write(&mut p);
        p
    }
}

/// `sqrt(gx^2 + gy^2 + eps^2) - eps` of a `[1,h,w]` tensor.
pub(crate) fn gradient_magnitude(t: &mut Tape, f: Var) -> Var {
    let gx = t.sobel_x(f);
    let gy = t.sobel_y(f);
    let gx2 = t.square(gx);
    let gy2 = t.square(gy);
    let s = t.add(gx2, gy2);
    let s = t.offset(s, MAGNITUDE_EPS * MAGNITUDE_EPS);
    let r = t.sqrt(s);
    t.offset(r, -MAGNITUDE_EPS)
}

/// `clamp(g / (p95(g) + eps), 0, 1)`
pub(crate) fn percentile_normalize(t: &mut Tape, g: Var) -> Var {
    let p = t.quantile(g, NORMALIZER_QUANTILE);
    let p = t.offset(p, NORMALIZER_EPS);
    let r = t.div(g, p);
    t.clamp(r, 0.0, 1.0)
}

/// Luminance `[1,h,w]` of a `[3,h,w]` linear-RGB tensor.
pub(crate) fn luma_var(t: &mut Tape, image: Var) -> Var {
    let k = t.constant(vec![3.0 * 0.2126, 3.0 * 0.7152, 3.0 * 0.0722], Shape::vector(3));
    let weighted = t.mul(image, k);
    t.mean_channels(weighted)
}

/// Edge perception factor: pointwise max of normalized-free luminance and
/// depth gradient magnitudes, normalized by its 95th percentile.
pub fn edge_factor_var(t: &mut Tape, image: Var, depth: Var) -> Var {
    let l = luma_var(t, image);
    let gl = gradient_magnitude(t, l);
    let gd = gradient_magnitude(t, depth);
    let g = t.maximum(gl, gd);
    percentile_normalize(t, g)
}

pub fn edge_factor(image: &ColorField, depth: &ScalarField) -> Result<ScalarField> {
    if image.dims() != depth.dims() {
        return Err(invalid(format!("edge_factor: image {:?} vs depth {:?}", image.dims(), depth.dims())));
    }
    if depth.width < 3 || depth.height < 3 {
        return Err(invalid("edge_factor needs at least 3x3 fields"));
    }
    let mut t = Tape::new();
    let i = color_const(&mut t, image);
    let d = scalar_const(&mut t, depth);
    let e = edge_factor_var(&mut t, i, d);
    Ok(to_scalar_field(&t, e))
}

/// Differentiable attenuation map `[3,h,w]` from depth `[1,h,w]`, edge factor
/// `[1,h,w]` and a scalar water modulation.
pub fn attenuation_map_var(t: &mut Tape, depth: Var, edge: Var, vars: &ParamVars, t_mod: Var) -> Var {
    let beta = t.softplus(vars.get(SLOT_THETA_BETA));
    let k = t.mul(vars.get(SLOT_W), beta);
    let gamma = t.clamp(vars.get(SLOT_GAMMA), 0.0, 1.0);
    let ge = t.mul(gamma, edge);
    let factor = t.rsub(1.0, ge);
    let fd = t.mul(factor, depth);
    let fd = t.mul(fd, t_mod);
    let expo = t.mul(k, fd);
    let expo = t.neg(expo);
    t.exp(expo)
}

fn check_depth(depth: &ScalarField) -> Result<()> {
    if depth.data.iter().any(|&v| v < 0.0) {
        return Err(invalid("depth must be non-negative"));
    }
    Ok(())
}

/// Attenuation map with an explicitly supplied edge factor.
pub fn attenuation_map_with_edge(depth: &ScalarField, edge: &ScalarField, p: &AttenuationParams, t_mod: f64) -> Result<ColorField> {
    check_depth(depth)?;
    if depth.dims() != edge.dims() {
        return Err(invalid("attenuation_map: depth and edge dims differ"));
    }
    if !(t_mod > 0.0 && t_mod <= 2.0) {
        return Err(invalid(format!("t_mod must lie in (0, 2], got {t_mod}")));
    }
    let mut t = Tape::new();
    let vars = ParamVars::load(&mut t, &p.to_params(), false);
    let d = scalar_const(&mut t, depth);
    let e = scalar_const(&mut t, edge);
    let tm = t.scalar(t_mod);
    let a = attenuation_map_var(&mut t, d, e, &vars, tm);
    Ok(to_color_field(&t, a))
}

/// Attenuation map with the edge factor derived from `image` and `depth`.
pub fn attenuation_map(depth: &ScalarField, image: &ColorField, p: &AttenuationParams, t_mod: f64) -> Result<ColorField> {
    check_depth(depth)?;
    let e = edge_factor(image, depth)?;
    attenuation_map_with_edge(depth, &e, p, t_mod)
}
