//! Multi-scale depth-aware backscatter.
//!
//! Optical depth `tau = b * D * C(D) * (1 - lambda * E_d(D)) * (1 + delta * M(D) * D)`,
//! backscatter `B = B_inf * (1 - exp(-tau))` and channel-free scattering
//! opacity `B_s = 1 - exp(-tau)`. `M` comes from a three-branch depth pyramid
//! (full, 1/2, 1/4) with channel and spatial attention.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attenuation::{gradient_magnitude, percentile_normalize};
use crate::diff::{logit, scalar_const, sigmoid, softplus, softplus_inv, to_color_field, to_scalar_field, ParamVars, ParamVector, Shape, Tape, Var};
use crate::error::{invalid, Result};
use crate::field::{ColorField, ScalarField};

pub const SLOT_B_INF: &str = "scatter/b_inf_raw";
pub const SLOT_THETA_B: &str = "scatter/theta_b";
pub const SLOT_LAMBDA: &str = "scatter/lambda";
pub const SLOT_DELTA: &str = "scatter/delta";
pub const BRANCH_WEIGHT: [&str; 3] = ["scatter/branch1/weight", "scatter/branch2/weight", "scatter/branch3/weight"];
pub const BRANCH_BIAS: [&str; 3] = ["scatter/branch1/bias", "scatter/branch2/bias", "scatter/branch3/bias"];
pub const SLOT_CA_W1: &str = "scatter/channel_att/w1";
pub const SLOT_CA_B1: &str = "scatter/channel_att/b1";
pub const SLOT_CA_W2: &str = "scatter/channel_att/w2";
pub const SLOT_CA_B2: &str = "scatter/channel_att/b2";
pub const SLOT_SA_W: &str = "scatter/spatial_att/weight";
pub const SLOT_SA_B: &str = "scatter/spatial_att/bias";
pub const SLOT_FUSE_W: &str = "scatter/fusion/weight";
pub const SLOT_FUSE_B: &str = "scatter/fusion/bias";

const FEATURES: usize = 4;
const HIDDEN: usize = 2;
const BRANCHES: usize = 3;
const MIN_DIM: usize = 8;

/// Learnable scattering parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterParams {
    pub b_inf_raw: [f64; 3],
    pub theta_b: f64,
    pub lambda: f64,
    pub delta: f64,
    /// Per branch: `[4 * 9]` weights and `[4]` biases.
    pub branch_weight: [Vec<f64>; 3],
    pub branch_bias: [Vec<f64>; 3],
    pub ca_w1: Vec<f64>,
    pub ca_b1: Vec<f64>,
    pub ca_w2: Vec<f64>,
    pub ca_b2: Vec<f64>,
    pub sa_weight: Vec<f64>,
    pub sa_bias: f64,
    pub fuse_weight: Vec<f64>,
    pub fuse_bias: f64,
}

impl ScatterParams {
    /// Conv and attention weights from a seeded uniform(-0.1, 0.1), biases 0.
    pub fn init(seed: u64, b_inf: [f64; 3], b: f64, lambda: f64, delta: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect() };
        Self {
            b_inf_raw: b_inf.map(logit),
            theta_b: softplus_inv(b),
            lambda,
            delta,
            branch_weight: [u(FEATURES * 9), u(FEATURES * 9), u(FEATURES * 9)],
            branch_bias: [vec![0.0; FEATURES], vec![0.0; FEATURES], vec![0.0; FEATURES]],
            ca_w1: u(HIDDEN * FEATURES),
            ca_b1: vec![0.0; HIDDEN],
            ca_w2: u(FEATURES * HIDDEN),
            ca_b2: vec![0.0; FEATURES],
            sa_weight: u(2 * 9),
            sa_bias: 0.0,
            fuse_weight: u(BRANCHES * FEATURES),
            fuse_bias: 0.0,
        }
    }

    pub fn b_inf(&self) -> [f64; 3] {
        self.b_inf_raw.map(sigmoid)
    }

    pub fn b(&self) -> f64 {
        softplus(self.theta_b)
    }

    pub fn write(&self, p: &mut ParamVector) {
        p.insert(SLOT_B_INF, Shape::vector(3), self.b_inf_raw.to_vec());
        p.insert(SLOT_THETA_B, Shape::scalar(), vec![self.theta_b]);
        p.insert(SLOT_LAMBDA, Shape::scalar(), vec![self.lambda]);
        p.insert(SLOT_DELTA, Shape::scalar(), vec![self.delta]);
        for i in 0..BRANCHES {
            p.insert(BRANCH_WEIGHT[i], Shape::new(FEATURES, 9, 1), self.branch_weight[i].clone());
            p.insert(BRANCH_BIAS[i], Shape::vector(FEATURES), self.branch_bias[i].clone());
        }
        p.insert(SLOT_CA_W1, Shape::new(HIDDEN, FEATURES, 1), self.ca_w1.clone());
        p.insert(SLOT_CA_B1, Shape::vector(HIDDEN), self.ca_b1.clone());
        p.insert(SLOT_CA_W2, Shape::new(FEATURES, HIDDEN, 1), self.ca_w2.clone());
        p.insert(SLOT_CA_B2, Shape::vector(FEATURES), self.ca_b2.clone());
        p.insert(SLOT_SA_W, Shape::new(1, 18, 1), self.sa_weight.clone());
        p.insert(SLOT_SA_B, Shape::scalar(), vec![self.sa_bias]);
        p.insert(SLOT_FUSE_W, Shape::new(1, BRANCHES * FEATURES, 1), self.fuse_weight.clone());
        p.insert(SLOT_FUSE_B, Shape::scalar(), vec![self.fuse_bias]);
    }

    pub fn read(p: &ParamVector) -> Result<Self> {
        let arr3 = |s: &[f64]| [s[0], s[1], s[2]];
        let v = |name: &str| -> Result<Vec<f64>> { Ok(p.try_get(name)?.to_vec()) };
        Ok(Self {
            b_inf_raw: arr3(p.try_get(SLOT_B_INF)?),
            theta_b: p.try_get(SLOT_THETA_B)?[0],
            lambda: p.try_get(SLOT_LAMBDA)?[0],
            delta: p.try_get(SLOT_DELTA)?[0],
            branch_weight: [v(BRANCH_WEIGHT[0])?, v(BRANCH_WEIGHT[1])?, v(BRANCH_WEIGHT[2])?],
            branch_bias: [v(BRANCH_BIAS[0])?, v(BRANCH_BIAS[1])?, v(BRANCH_BIAS[2])?],
            ca_w1: v(SLOT_CA_W1)?,
            ca_b1: v(SLOT_CA_B1)?,
            ca_w2: v(SLOT_CA_W2)?,
            ca_b2: v(SLOT_CA_B2)?,
            sa_weight: v(SLOT_SA_W)?,
            sa_bias: p.try_get(SLOT_SA_B)?[0],
            fuse_weight: v(SLOT_FUSE_W)?,
            fuse_bias: p.try_get(SLOT_FUSE_B)?[0],
        })
    }

    pub fn to_params(&self) -> ParamVector {
        let mut p = ParamVector::new();
        self.write(&mut p);
        p
    }
}

/// Non-learnable scattering settings and module switches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterConfig {
    /// Depth-variance scale of the confidence factor.
    pub sigma_c: f64,
    pub use_confidence: bool,
    pub use_edge: bool,
    pub use_multiscale: bool,
}

impl Default for ScatterConfig {
    fn default() -> Self {
        Self { sigma_c: 0.5, use_confidence: true, use_edge: true, use_multiscale: true }
    }
}

impl ScatterConfig {
    /// All modulators off: the model reduces to `B_inf (1 - exp(-b D))`.
    pub fn neutral() -> Self {
        Self { use_confidence: false, use_edge: false, use_multiscale: false, ..Self::default() }
    }
}

/// Homogeneous-medium backscatter `B_inf (1 - exp(-b d))`.
pub fn simple_scatter(d: f64, b: f64, b_inf: [f64; 3]) -> [f64; 3] {
    let s = 1.0 - (-b * d).exp();
    b_inf.map(|v| v * s)
}

fn check_min(depth: &ScalarField, min: usize, what: &str) -> Result<()> {
    if depth.width < min || depth.height < min {
        return Err(invalid(format!("{what} needs at least {min}x{min}, got {}x{}", depth.width, depth.height)));
    }
    Ok(())
}

/// `exp(-Var_3x3(D) / sigma_c^2)` with replicate padding.
pub fn depth_confidence_var(t: &mut Tape, depth: Var, sigma_c: f64) -> Var {
    let mean = t.box3(depth);
    let sq = t.square(depth);
    let mean_sq = t.box3(sq);
    let m2 = t.square(mean);
    let var = t.sub(mean_sq, m2);
    let var = t.relu(var);
    let s = t.scale(var, -1.0 / (sigma_c * sigma_c));
    t.exp(s)
}

pub fn depth_confidence(depth: &ScalarField, sigma_c: f64) -> Result<ScalarField> {
    check_min(depth, 3, "depth_confidence")?;
    let mut t = Tape::new();
    let d = scalar_const(&mut t, depth);
    let c = depth_confidence_var(&mut t, d, sigma_c);
    Ok(to_scalar_field(&t, c))
}

pub fn depth_edge_var(t: &mut Tape, depth: Var) -> Var {
    let g = gradient_magnitude(t, depth);
    percentile_normalize(t, g)
}

pub fn depth_edge(depth: &ScalarField) -> Result<ScalarField> {
    check_min(depth, 3, "depth_edge")?;
    let mut t = Tape::new();
    let d = scalar_const(&mut t, depth);
    let e = depth_edge_var(&mut t, d);
    Ok(to_scalar_field(&t, e))
}

/// Pyramid features fused to a `[1,h,w]` map in (0, 1).
pub fn multiscale_features_var(t: &mut Tape, depth: Var, vars: &ParamVars) -> Var {
    let s = t.shape(depth);
    let (h, w) = (s.h, s.w);
    let mut groups = Vec::with_capacity(BRANCHES);
    for (i, factor) in [1usize, 2, 4].into_iter().enumerate() {
        let input = if factor == 1 { depth } else { t.downsample(depth, factor) };
        let conv = t.conv2d(input, vars.get(BRANCH_WEIGHT[i]), vars.get(BRANCH_BIAS[i]), 3);
        let act = t.relu(conv);
        let feat = if factor == 1 { act } else { t.upsample(act, factor, h, w) };
        groups.push(feat);
    }
    // Channel attention, one shared MLP applied per branch group.
    let mut weighted = Vec::with_capacity(BRANCHES);
    for g in groups {
        let pooled = t.spatial_mean(g);
        let hdn = t.matvec(vars.get(SLOT_CA_W1), pooled);
        let hdn = t.add(hdn, vars.get(SLOT_CA_B1));
        let hdn = t.relu(hdn);
        let gate = t.matvec(vars.get(SLOT_CA_W2), hdn);
        let gate = t.add(gate, vars.get(SLOT_CA_B2));
        let gate = t.sigmoid(gate);
        weighted.push(t.mul(g, gate));
    }
    let feats = t.concat_channels(&weighted);
    // Spatial attention over channel mean and max.
    let avg = t.mean_channels(feats);
    let mx = t.max_channels(feats);
    let pooled = t.concat_channels(&[avg, mx]);
    let sa = t.conv2d(pooled, vars.get(SLOT_SA_W), vars.get(SLOT_SA_B), 3);
    let sa = t.sigmoid(sa);
    let feats = t.mul(feats, sa);
    let fused = t.conv2d(feats, vars.get(SLOT_FUSE_W), vars.get(SLOT_FUSE_B), 1);
    t.sigmoid(fused)
}

pub fn multiscale_features(depth: &ScalarField, p: &ScatterParams) -> Result<ScalarField> {
    check_min(depth, MIN_DIM, "multiscale_features")?;
    let mut t = Tape::new();
    let vars = ParamVars::load(&mut t, &p.to_params(), false);
    let d = scalar_const(&mut t, depth);
    let m = multiscale_features_var(&mut t, d, &vars);
    Ok(to_scalar_field(&t, m))
}

/// Tape handles of one scattering evaluation.
#[derive(Clone, Copy, Debug)]
pub struct ScatterVars {
    /// `[3,h,w]`
    pub backscatter: Var,
    /// `[1,h,w]`
    pub opacity: Var,
    /// `[1,h,w]`
    pub tau: Var,
    pub confidence: Option<Var>,
    pub edge: Option<Var>,
    pub features: Option<Var>,
}

pub fn scattering_map_var(t: &mut Tape, depth: Var, vars: &ParamVars, cfg: &ScatterConfig) -> ScatterVars {
    let b = t.softplus(vars.get(SLOT_THETA_B));
    let mut tau = t.mul(b, depth);
    let mut out = ScatterVars { backscatter: tau, opacity: tau, tau, confidence: None, edge: None, features: None };
    if cfg.use_confidence {
        let c = depth_confidence_var(t, depth, cfg.sigma_c);
        tau = t.mul(tau, c);
        out.confidence = Some(c);
    }
    if cfg.use_edge {
        let e = depth_edge_var(t, depth);
        let lambda = t.clamp(vars.get(SLOT_LAMBDA), 0.0, 1.0);
        let le = t.mul(lambda, e);
        let f = t.rsub(1.0, le);
        tau = t.mul(tau, f);
        out.edge = Some(e);
    }
    if cfg.use_multiscale {
        let m = multiscale_features_var(t, depth, vars);
        let delta = t.relu(vars.get(SLOT_DELTA));
        let md = t.mul(m, depth);
        let dmd = t.mul(delta, md);
        let f = t.offset(dmd, 1.0);
        tau = t.mul(tau, f);
        out.features = Some(m);
    }
    let neg = t.neg(tau);
    let tr = t.exp(neg);
    let opacity = t.rsub(1.0, tr);
    let b_inf = t.sigmoid(vars.get(SLOT_B_INF));
    out.backscatter = t.mul(b_inf, opacity);
    out.opacity = opacity;
    out.tau = tau;
    out
}

/// Full scattering evaluation on plain fields.
#[derive(Clone, Debug)]
pub struct ScatterOutput {
    pub backscatter: ColorField,
    pub opacity: ScalarField,
    pub tau: ScalarField,
}

pub fn scattering_map(depth: &ScalarField, p: &ScatterParams, cfg: &ScatterConfig) -> Result<ScatterOutput> {
    if depth.data.iter().any(|&v| v < 0.0) {
        return Err(invalid("depth must be non-negative"));
    }
    if cfg.use_confidence || cfg.use_edge {
        check_min(depth, 3, "scattering_map")?;
    }
    if cfg.use_multiscale {
        check_min(depth, MIN_DIM, "scattering_map")?;
    }
    let mut t = Tape::new();
    let vars = ParamVars::load(&mut t, &p.to_params(), false);
    let d = scalar_const(&mut t, depth);
    let s = scattering_map_var(&mut t, d, &vars, cfg);
    Ok(ScatterOutput {
        backscatter: to_color_field(&t, s.backscatter),
        opacity: to_scalar_field(&t, s.opacity),
        tau: to_scalar_field(&t, s.tau),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::grad_check;
    use rand::{Rng, SeedableRng};

    #[test]
    fn simple_scatter_values() {
        assert_eq!(simple_scatter(0.0, 0.3, [0.2, 0.5, 0.6]), [0.0; 3]);
        let b = simple_scatter(10.0, 0.1, [0.2, 0.5, 0.6]);
        let k = 1.0 - (-1.0f64).exp();
        for (v, want) in b.iter().zip([0.2 * k, 0.5 * k, 0.6 * k]) {
            assert!((v - want).abs() < 1e-15);
        }
        assert!((b[0] - 0.1264).abs() < 5e-5 && (b[1] - 0.3161).abs() < 5e-5 && (b[2] - 0.3793).abs() < 5e-5);
        let far = simple_scatter(1e4, 0.1, [0.2, 0.5, 0.6]);
        assert_eq!(far, [0.2, 0.5, 0.6]);
    }

    #[test]
    fn confidence_cases() {
        let c = depth_confidence(&ScalarField::filled(6, 6, 4.0), 0.5).unwrap();
        assert!(c.data.iter().all(|&v| v == 1.0));

        let noisy = ScalarField::from_fn(8, 8, |x, y| if (x + y) % 2 == 0 { 0.0 } else { 20.0 });
        let c = depth_confidence(&noisy, 0.5).unwrap();
        assert!(c.data.iter().all(|&v| v < 1e-6));

        // Window straddling the step holds three (or six) ones out of nine.
        let step = ScalarField::from_fn(8, 8, |x, _| if x >= 4 { 1.0 } else { 0.0 });
        let c = depth_confidence(&step, 1.0).unwrap();
        let var = 3.0 / 9.0 - (3.0f64 / 9.0).powi(2);
        assert!((c.get(3, 4) - (-var).exp()).abs() < 1e-12);
        assert!((c.get(4, 4) - (-var).exp()).abs() < 1e-12);
        assert_eq!(c.get(0, 4), 1.0);
    }

    #[test]
    fn depth_edge_cases() {
        let e = depth_edge(&ScalarField::filled(6, 6, 2.0)).unwrap();
        assert!(e.data.iter().all(|&v| v == 0.0));

        let ramp = ScalarField::from_fn(16, 16, |x, _| 1.0 + 0.2 * x as f64);
        let e = depth_edge(&ramp).unwrap();
        for y in 0..16 {
            for x in 1..15 {
                assert!((e.get(x, y) - 1.0).abs() < 1e-6);
            }
        }
        let scaled = depth_edge(&ramp.map(|v| 7.5 * v)).unwrap();
        for (a, b) in e.data.iter().zip(&scaled.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn multiscale_shapes_and_zero_fusion() {
        let mut p = ScatterParams::init(7, [0.2, 0.5, 0.6], 0.1, 0.5, 0.05);
        let d = ScalarField::from_fn(64, 64, |x, y| 2.0 + 0.01 * (x * y) as f64);
        let m = multiscale_features(&d, &p).unwrap();
        assert_eq!(m.dims(), (64, 64));
        assert!(m.data.iter().all(|&v| v > 0.0 && v < 1.0));

        p.fuse_weight.iter_mut().for_each(|w| *w = 0.0);
        let m = multiscale_features(&ScalarField::filled(16, 16, 3.0), &p).unwrap();
        assert!(m.data.iter().all(|&v| v == 0.5));
        assert!(multiscale_features(&ScalarField::filled(7, 16, 3.0), &p).is_err());
    }

    #[test]
    fn scattering_reduces_to_simple_model() {
        let p = ScatterParams::init(1, [0.2, 0.5, 0.6], 0.1, 0.0, 0.0);
        let d = ScalarField::from_fn(10, 9, |x, y| 0.5 * x as f64 + 0.3 * y as f64);
        let s = scattering_map(&d, &p, &ScatterConfig::neutral()).unwrap();
        for y in 0..9 {
            for x in 0..10 {
                let want = simple_scatter(d.get(x, y), p.b(), p.b_inf());
                let got = s.backscatter.get(x, y);
                for c in 0..3 {
                    assert!((got[c] - want[c]).abs() < 1e-12);
                }
                let tau = s.tau.get(x, y);
                assert!((s.opacity.get(x, y) + (-tau).exp() - 1.0).abs() < 1e-15);
            }
        }
        let zero = scattering_map(&ScalarField::filled(8, 8, 0.0), &p, &ScatterConfig::default()).unwrap();
        assert!(zero.backscatter.data.iter().chain(&zero.opacity.data).all(|&v| v == 0.0));
    }

    #[test]
    fn edge_modulation_halves_tau() {
        // Interior of a ramp has E_d = 1, so lambda = 0.5 halves b D.
        let p = ScatterParams::init(1, [0.2, 0.5, 0.6], 0.1, 0.5, 0.0);
        let cfg = ScatterConfig { use_edge: true, ..ScatterConfig::neutral() };
        let d = ScalarField::from_fn(12, 12, |x, _| 4.0 + 0.5 * x as f64);
        let s = scattering_map(&d, &p, &cfg).unwrap();
        let tau = s.tau.get(6, 6);
        assert!((tau - 0.5 * 0.1 * 7.0).abs() < 1e-6, "{tau}");
        let dz = ScalarField::from_fn(12, 12, |x, _| 10.0 + 1e-3 * x as f64);
        let s = scattering_map(&dz, &p, &cfg).unwrap();
        assert!((s.opacity.get(6, 6) - 0.3935).abs() < 5e-4);
    }

    #[test]
    fn gradients_pass_gradcheck() {
        let (w, h) = (8, 8);
        for seed in [1u64, 2, 4] {
            // Seeds fixed so no probe straddles a ReLU or max kink.
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let depth = ScalarField::from_fn(w, h, |_, _| rng.gen_range(2.0..3.0));
            let mut p = ScatterParams::init(seed, [0.2, 0.5, 0.6], 0.12, 0.4, 0.05).to_params();
            p.insert("depth", Shape::plane(h, w), depth.data.clone());
            let cfg = ScatterConfig::default();
            let r = grad_check(
                "scattering_map",
                |t, v| {
                    let s = scattering_map_var(t, v.get("depth"), v, &cfg);
                    let a = t.mean(s.backscatter);
                    let b = t.mean(s.opacity);
                    Ok(t.add(a, b))
                },
                &p,
                1e-4,
            )
            .unwrap();
            assert!(r.max_rel_err < 1e-4, "seed {seed}: {r:?}");
        }
    }
}
