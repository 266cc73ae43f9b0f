//! Water-type classification, the blue/green water index and the staged
//! learning-rate controller.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{backward, ParamVars, ParamVector, Shape, Tape, Var};
use crate::error::{invalid, Result};
use crate::field::ColorField;
use crate::losses::LossWeights;
use crate::train::{adam_step, AdamState};

pub const HIDDEN: usize = 16;
pub const SLOT_W1: &str = "classifier/w1";
pub const SLOT_B1: &str = "classifier/b1";
pub const SLOT_W2: &str = "classifier/w2";
pub const SLOT_B2: &str = "classifier/b2";
/// Water index assigned to each class.
pub const CLASS_ANCHORS: [f64; 3] = [0.0, 0.5, 1.0];
const RATIO_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WaterClass {
    Clear,
    Medium,
    Turbid,
}

impl WaterClass {
    pub const ALL: [WaterClass; 3] = [WaterClass::Clear, WaterClass::Medium, WaterClass::Turbid];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }

    /// Class whose anchor is nearest to the water index `w`.
    pub fn from_index_value(w: f64) -> Self {
        if w < 0.25 {
            WaterClass::Clear
        } else if w < 0.75 {
            WaterClass::Medium
        } else {
            WaterClass::Turbid
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            WaterClass::Clear => "clear",
            WaterClass::Medium => "medium",
            WaterClass::Turbid => "turbid",
        }
    }
}

impl std::str::FromStr for WaterClass {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clear" => Ok(WaterClass::Clear),
            "medium" => Ok(WaterClass::Medium),
            "turbid" => Ok(WaterClass::Turbid),
            _ => Err(invalid(format!("unknown water class `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaterProfile {
    /// Probabilities of clear, medium, turbid.
    pub probs: [f64; 3],
    pub w: f64,
    pub bg_ratio: f64,
}

impl WaterProfile {
    pub fn from_probs(probs: [f64; 3], bg_ratio: f64) -> Self {
        let w = probs.iter().zip(CLASS_ANCHORS).map(|(p, a)| p * a).sum::<f64>().clamp(0.0, 1.0);
        Self { probs, w, bg_ratio }
    }

    /// Clear-water profile with `t_mod = 1`.
    pub fn neutral() -> Self {
        Self::from_probs([1.0, 0.0, 0.0], 1.0)
    }

    pub fn class(&self) -> WaterClass {
        let mut best = 0;
        for i in 1..3 {
            if self.probs[i] > self.probs[best] {
                best = i;
            }
        }
        WaterClass::from_index(best)
    }

    /// Water-path modulation `t_mod` derived from the class probabilities.
    pub fn t_mod(&self) -> f64 {
        let mods = [1.0, 1.1, 1.2];
        self.probs.iter().zip(mods).map(|(p, m)| p * m).sum()
    }
}

/// Two-layer MLP over the mean image color.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierWeights {
    /// `[HIDDEN x 3]`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `[3 x HIDDEN]`, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl ClassifierWeights {
    pub fn zeros() -> Self {
        Self { w1: vec![0.0; HIDDEN * 3], b1: vec![0.0; HIDDEN], w2: vec![0.0; 3 * HIDDEN], b2: vec![0.0; 3] }
    }

    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s1 = (1.0f64 / 3.0).sqrt();
        let s2 = (1.0 / HIDDEN as f64).sqrt();
        Self {
            w1: (0..HIDDEN * 3).map(|_| rng.gen_range(-s1..s1)).collect(),
            b1: (0..HIDDEN).map(|_| rng.gen_range(0.0..0.1)).collect(),
            w2: (0..3 * HIDDEN).map(|_| rng.gen_range(-s2..s2)).collect(),
            b2: vec![0.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [self.w1.len(), self.b1.len(), self.w2.len(), self.b2.len()];
        if sizes != [HIDDEN * 3, HIDDEN, 3 * HIDDEN, 3] {
            return Err(invalid(format!("classifier weight sizes {sizes:?}")));
        }
        if self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2).any(|v| !v.is_finite()) {
            return Err(invalid("classifier weights must be finite"));
        }
        Ok(())
    }

    pub fn write(&self, p: &mut ParamVector) {
        p.insert(SLOT_W1, Shape::new(HIDDEN, 3, 1), self.w1.clone());
        p.insert(SLOT_B1, Shape::vector(HIDDEN), self.b1.clone());
        p.insert(SLOT_W2, Shape::new(3, HIDDEN, 1), self.w2.clone());
        p.insert(SLOT_B2, Shape::vector(3), self.b2.clone());
    }

    pub fn read(p: &ParamVector) -> Result<Self> {
        let cw = Self {
            w1: p.try_get(SLOT_W1)?.to_vec(),
            b1: p.try_get(SLOT_B1)?.to_vec(),
            w2: p.try_get(SLOT_W2)?.to_vec(),
            b2: p.try_get(SLOT_B2)?.to_vec(),
        };
        cw.validate()?;
        Ok(cw)
    }

    pub fn to_params(&self) -> ParamVector {
        let mut p = ParamVector::new();
        self.write(&mut p);
        p
    }
}

/// Class logits from a `[3,1,1]` pooled color.
pub fn classifier_logits_var(t: &mut Tape, pooled: Var, vars: &ParamVars) -> Var {
    let h = t.matvec(vars.get(SLOT_W1), pooled);
    let h = t.add(h, vars.get(SLOT_B1));
    let h = t.relu(h);
    let o = t.matvec(vars.get(SLOT_W2), h);
    t.add(o, vars.get(SLOT_B2))
}

/// Class probabilities of a `[3,h,w]` image.
pub fn classify_var(t: &mut Tape, image: Var, vars: &ParamVars) -> Var {
    let pooled = t.spatial_mean(image);
    let logits = classifier_logits_var(t, pooled, vars);
    t.softmax(logits)
}

fn bg_ratio(mean: [f64; 3]) -> f64 {
    mean[2] / mean[1].max(RATIO_EPS)
}

pub fn classify_water(image: &ColorField, cw: &ClassifierWeights) -> Result<WaterProfile> {
    if image.pixel_count() == 0 {
        return Err(invalid("classify_water: empty image"));
    }
    let mean = image.channel_means();
    let probs = classify_mean(mean, cw);
    Ok(WaterProfile::from_probs(probs, bg_ratio(mean)))
}

/// Probabilities for an already pooled mean color.
pub fn classify_mean(mean: [f64; 3], cw: &ClassifierWeights) -> [f64; 3] {
    let mut t = Tape::new();
    let vars = ParamVars::load(&mut t, &cw.to_params(), false);
    let x = t.constant(mean.to_vec(), Shape::vector(3));
    let logits = classifier_logits_var(&mut t, x, &vars);
    let p = t.softmax(logits);
    let v = t.value(p);
    [v[0], v[1], v[2]]
}

/// Ratio endpoints of the heuristic index: `r_hi` maps to 0, `r_lo` to 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeuristicConfig {
    pub r_lo: f64,
    pub r_hi: f64,
}

impl Default for HeuristicConfig {
    fn default() -> Self {
        Self { r_lo: 0.8, r_hi: 1.3 }
    }
}

pub fn water_index_from_ratio(bg: f64, cfg: &HeuristicConfig) -> f64 {
    ((cfg.r_hi - bg) / (cfg.r_hi - cfg.r_lo)).clamp(0.0, 1.0)
}

pub fn water_index_heuristic(image: &ColorField, cfg: &HeuristicConfig) -> Result<f64> {
    let mean = image.channel_means();
    if !(mean[1] > 0.0) {
        return Err(invalid("water_index_heuristic: green channel mean must be positive"));
    }
    Ok(water_index_from_ratio(bg_ratio(mean), cfg))
}

/// Settings of the offline classifier fit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub iterations: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { iterations: 1500, lr: 0.02, seed: 17 }
    }
}

/// Fits the classifier by full-batch Adam on mean cross-entropy.
pub fn fit_classifier(samples: &[([f64; 3], WaterClass)], cfg: &FitConfig) -> Result<ClassifierWeights> {
    if samples.is_empty() {
        return Err(invalid("fit_classifier: no samples"));
    }
    let mut params = ClassifierWeights::random(cfg.seed).to_params();
    let mut state = AdamState::new(&params);
    let n = samples.len() as f64;
    for _ in 0..cfg.iterations {
        let (_, grads) = backward(
            |t, v| {
                let mut total = t.scalar(0.0);
                for (mean, class) in samples {
                    let x = t.constant(mean.to_vec(), Shape::vector(3));
                    let logits = classifier_logits_var(t, x, v);
                    let p = t.softmax(logits);
                    let pc = t.slice_channels(p, class.index(), 1);
                    let lp = t.ln(pc);
                    total = t.sub(total, lp);
                }
                Ok(t.scale(total, 1.0 / n))
            },
            &params,
        )?;
        adam_step(&mut params, &grads, &mut state, cfg.lr)?;
    }
    ClassifierWeights::read(&params)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    /// Fraction of iterations after which the water path is enabled.
    pub enable_fraction: f64,
    /// Physics learning rate at enable time.
    pub lr_physics_start: f64,
    /// Clear-water physics learning rate at the final iteration.
    pub lr_physics_end: f64,
    pub cap_attenuation: f64,
    pub cap_scattering: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self { enable_fraction: 1.0 / 3.0, lr_physics_start: 1e-4, lr_physics_end: 5e-5, cap_attenuation: 5e-4, cap_scattering: 1e-4 }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.enable_fraction > 0.0 && self.enable_fraction < 1.0) {
            return Err(invalid(format!("enable_fraction must lie in (0, 1), got {}", self.enable_fraction)));
        }
        let lrs = [self.lr_physics_start, self.lr_physics_end, self.cap_attenuation, self.cap_scattering];
        if lrs.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(invalid("controller learning rates must be positive"));
        }
        Ok(())
    }

    /// First iteration with the water path enabled.
    pub fn enable_iteration(&self, total: usize) -> usize {
        (self.enable_fraction * total as f64).ceil() as usize
    }
}

/// Learning rates and loss coefficients for one iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSchedule {
    /// Multiplier on the per-attribute Gaussian learning rates.
    pub lr_gaussians: f64,
    pub lr_attenuation: f64,
    pub lr_scattering: f64,
    pub alpha_w: f64,
    pub beta_w: f64,
    pub water_path_enabled: bool,
}

pub fn controller(profile: &WaterProfile, iter: usize, total: usize, cfg: &ControllerConfig, weights: &LossWeights) -> Result<TrainingSchedule> {
    if iter >= total {
        return Err(invalid(format!("controller: iteration {iter} outside [0, {total})")));
    }
    let (alpha_w, beta_w) = weights.path_coefficients(profile.w);
    let enable = cfg.enable_iteration(total);
    let enabled = iter >= enable;
    let (mut la, mut ls) = (0.0, 0.0);
    if enabled {
        let span = total.saturating_sub(1).saturating_sub(enable);
        let progress = if span == 0 { 1.0 } else { (iter - enable) as f64 / span as f64 };
        let clear = cfg.lr_physics_start + (cfg.lr_physics_end - cfg.lr_physics_start) * progress;
        let turbid = cfg.lr_physics_start;
        let lr = match profile.class() {
            WaterClass::Clear => clear,
            WaterClass::Turbid => turbid,
            WaterClass::Medium => clear + (turbid - clear) * profile.w,
        };
        la = lr.min(cfg.cap_attenuation);
        ls = lr.min(cfg.cap_scattering);
    }
    Ok(TrainingSchedule { lr_gaussians: 1.0, lr_attenuation: la, lr_scattering: ls, alpha_w, beta_w, water_path_enabled: enabled })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::grad_check;

    #[test]
    fn zero_weights_give_uniform_probs() {
        let img = ColorField::from_fn(5, 4, |x, y| [0.1 * x as f64, 0.2, 0.05 * y as f64]);
        let p = classify_water(&img, &ClassifierWeights::zeros()).unwrap();
        for v in p.probs {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((p.w - 0.5).abs() < 1e-15);
        assert!(classify_water(&ColorField::filled(0, 0, [0.0; 3]), &ClassifierWeights::zeros()).is_err());
    }

    #[test]
    fn probabilities_on_simplex() {
        let cw = ClassifierWeights::random(3);
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mean = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
            let p = classify_mean(mean, &cw);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn heuristic_endpoints() {
        let cfg = HeuristicConfig::default();
        assert_eq!(water_index_from_ratio(1.3, &cfg), 0.0);
        assert_eq!(water_index_from_ratio(0.8, &cfg), 1.0);
        assert!((water_index_from_ratio(1.05, &cfg) - 0.5).abs() < 1e-12);
        let img = ColorField::filled(2, 2, [0.1, 0.4, 0.52]);
        assert!(water_index_heuristic(&img, &cfg).unwrap().abs() < 1e-12);
        assert!(water_index_heuristic(&ColorField::filled(2, 2, [0.1, 0.0, 0.5]), &cfg).is_err());
    }

    fn profile(class: WaterClass, w: f64) -> WaterProfile {
        let mut probs = [0.1; 3];
        probs[class.index()] = 0.8;
        WaterProfile { probs, w, bg_ratio: 1.0 }
    }

    #[test]
    fn controller_schedules() {
        let cfg = ControllerConfig::default();
        let lw = LossWeights::default();
        let total = 30;
        let clear = profile(WaterClass::Clear, 0.1);
        let last = controller(&clear, total - 1, total, &cfg, &lw).unwrap();
        assert_eq!(last.lr_attenuation, 5e-5);
        assert_eq!(last.lr_scattering, 5e-5);
        let first = controller(&clear, 10, total, &cfg, &lw).unwrap();
        assert!(first.water_path_enabled && first.lr_attenuation == 1e-4);
        let pre = controller(&clear, 9, total, &cfg, &lw).unwrap();
        assert!(!pre.water_path_enabled && pre.lr_attenuation == 0.0 && pre.lr_scattering == 0.0);

        let turbid = profile(WaterClass::Turbid, 0.9);
        for i in 10..total {
            let s = controller(&turbid, i, total, &cfg, &lw).unwrap();
            assert_eq!((s.lr_attenuation, s.lr_scattering), (1e-4, 1e-4));
        }
        let medium = profile(WaterClass::Medium, 0.5);
        let m = controller(&medium, total - 1, total, &cfg, &lw).unwrap();
        assert!((m.lr_attenuation - 7.5e-5).abs() < 1e-18);
        assert!(controller(&clear, total, total, &cfg, &lw).is_err());
        assert!(ControllerConfig { enable_fraction: 1.5, ..cfg }.validate().is_err());
    }

    #[test]
    fn classifier_passes_gradcheck() {
        for seed in [1u64, 2, 3] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 40);
            let img = ColorField::from_fn(4, 4, |_, _| [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]);
            let mut p = ClassifierWeights::random(seed).to_params();
            p.insert("image", Shape::new(3, 4, 4), img.to_planar());
            let r = grad_check(
                "classify_water",
                |t, v| {
                    let probs = classify_var(t, v.get("image"), v);
                    let k = t.constant(vec![0.3, -0.5, 0.9], Shape::vector(3));
                    Ok(t.dot(probs, k))
                },
                &p,
                1e-4,
            )
            .unwrap();
            assert!(r.max_rel_err < 1e-4, "seed {seed}: {r:?}");
        }
    }
}
