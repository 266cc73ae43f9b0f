//! Optimizer, staged training loop and restoration by model inversion.

mod adam;
mod restore;

pub use adam::{adam_step, adam_step_with, AdamState};
pub use restore::{recover_physics, restore, Observation, RecoveryConfig, RecoveryResult, Restored};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::{classify_water, controller, ClassifierWeights, ControllerConfig, TrainingSchedule, WaterProfile};
use crate::attenuation::{edge_factor_var, attenuation_map_var, AttenuationParams, SLOT_GAMMA, SLOT_W};
use crate::diff::{color_const, ParamVars, ParamVector, Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::field::{ColorField, ScalarField};
use crate::losses::{l_basic_var, objective_var, psnr, LossBreakdown, LossWeights, ObjectiveInputs};
use crate::renderer::{
    cloud_from_params, cloud_to_params, rasterize, rasterize_var, Camera, GaussianPrimitive, RenderConfig, SLOT_COLOR, SLOT_LOG_SCALE,
    SLOT_MEAN, SLOT_OPACITY, SLOT_ROTATION,
};
use crate::scattering::{scattering_map_var, ScatterConfig, ScatterParams, SLOT_DELTA, SLOT_LAMBDA};

pub const GROUP_GAUSSIANS: &str = "gaussians/";
pub const GROUP_ATTENUATION: &str = "attenuation/";
pub const GROUP_SCATTER: &str = "scatter/";

/// Per-attribute Gaussian learning rates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianLrs {
    pub position: f64,
    pub color: f64,
    pub opacity: f64,
    pub scale: f64,
    pub rotation: f64,
}

impl Default for GaussianLrs {
    fn default() -> Self {
        Self { position: 1.6e-3, color: 2.5e-3, opacity: 5e-2, scale: 5e-3, rotation: 1e-3 }
    }
}

impl GaussianLrs {
    pub fn for_slot(&self, slot: &str) -> f64 {
        match slot {
            SLOT_MEAN => self.position,
            SLOT_COLOR => self.color,
            SLOT_OPACITY => self.opacity,
            SLOT_LOG_SCALE => self.scale,
            SLOT_ROTATION => self.rotation,
            _ => 0.0,
        }
    }

    fn all(&self) -> [f64; 5] {
        [self.position, self.color, self.opacity, self.scale, self.rotation]
    }
}

/// Initial values of the learnable medium parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysicsInit {
    pub beta: [f64; 3],
    pub gamma: f64,
    pub b: f64,
    pub b_inf: [f64; 3],
    pub lambda: f64,
    pub delta: f64,
}

impl Default for PhysicsInit {
    fn default() -> Self {
        Self { beta: [0.30, 0.12, 0.07], gamma: 0.5, b: 0.1, b_inf: [0.15, 0.35, 0.4], lambda: 0.5, delta: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Number of Gaussians initialized from back-projected depth.
    pub n_gaussians: usize,
    pub seed: u64,
    pub eval_interval: usize,
    pub lrs: GaussianLrs,
    pub controller: ControllerConfig,
    pub weights: LossWeights,
    pub physics_init: PhysicsInit,
    pub scatter: ScatterConfig,
    pub render: RenderConfig,
    /// Stop physics gradients from reaching Gaussians through rendered depth.
    pub detach_depth: bool,
    /// Stop gradients through the edge factor's percentile normalizer.
    pub detach_edge: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            n_gaussians: 200,
            seed: 0,
            eval_interval: 100,
            lrs: GaussianLrs::default(),
            controller: ControllerConfig::default(),
            weights: LossWeights::default(),
            physics_init: PhysicsInit::default(),
            scatter: ScatterConfig::default(),
            render: RenderConfig::default(),
            detach_depth: false,
            detach_edge: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.controller.validate()?;
        self.weights.validate()?;
        if self.lrs.all().iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(invalid("Gaussian learning rates must be positive"));
        }
        if self.n_gaussians == 0 {
            return Err(invalid("n_gaussians must be at least 1"));
        }
        if self.eval_interval == 0 {
            return Err(invalid("eval_interval must be at least 1"));
        }
        Ok(())
    }
}

/// Everything needed to resume rendering or restoration.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamVector,
    pub iteration: usize,
    pub profile: WaterProfile,
    pub config: TrainConfig,
}

impl Checkpoint {
    pub fn cloud(&self) -> Result<Vec<GaussianPrimitive>> {
        cloud_from_params(&self.params)
    }

    pub fn attenuation(&self) -> Result<AttenuationParams> {
        AttenuationParams::read(&self.params)
    }

    pub fn scatter(&self) -> Result<ScatterParams> {
        ScatterParams::read(&self.params)
    }

    pub fn classifier(&self) -> Result<ClassifierWeights> {
        ClassifierWeights::read(&self.params)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iter: usize,
    pub basic: f64,
    pub ab: f64,
    pub wat: f64,
    pub edge: f64,
    pub ms: f64,
    pub total: f64,
    /// Mean PSNR of the synthesized image against every training view.
    pub psnr: f64,
}

impl LogRow {
    fn new(iter: usize, b: &LossBreakdown, psnr: f64) -> Self {
        Self { iter, basic: b.basic, ab: b.ab, wat: b.wat, edge: b.edge, ms: b.ms, total: b.total, psnr }
    }
}

/// Result of a training run. A divergence keeps the last good checkpoint.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
    pub diverged: Option<String>,
}

/// Training views: observed images, cameras and (for initialization) depth.
#[derive(Clone, Debug)]
pub struct TrainViews<'a> {
    pub cameras: &'a [Camera],
    pub images: &'a [ColorField],
    pub depth: &'a [ScalarField],
}

impl TrainViews<'_> {
    fn validate(&self) -> Result<()> {
        let n = self.cameras.len();
        if n < 2 {
            return Err(invalid(format!("training needs at least 2 views, got {n}")));
        }
        if self.images.len() != n || self.depth.len() != n {
            return Err(invalid("cameras, images and depth maps must have equal counts"));
        }
        for (i, (cam, img)) in self.cameras.iter().zip(self.images).enumerate() {
            cam.validate()?;
            if img.dims() != (cam.width, cam.height) || self.depth[i].dims() != img.dims() {
                return Err(invalid(format!("view {i}: image, depth and camera dims differ")));
            }
        }
        Ok(())
    }
}

/// Seeds Gaussians by back-projecting a stratified pixel sample of every
/// view's depth map, colored by the observed pixel.
pub fn init_cloud(views: &TrainViews, n: usize, seed: u64) -> Vec<GaussianPrimitive> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nv = views.cameras.len();
    let mut cloud = Vec::with_capacity(n);
    for v in 0..nv {
        let m = n / nv + usize::from(v < n % nv);
        if m == 0 {
            continue;
        }
        let cam = &views.cameras[v];
        let (w, h) = (cam.width, cam.height);
        let gx = ((m as f64 * w as f64 / h as f64).sqrt().ceil() as usize).max(1);
        let gy = m.div_ceil(gx);
        let mut cells: Vec<(usize, usize)> = (0..gy).flat_map(|y| (0..gx).map(move |x| (x, y))).collect();
        cells.shuffle(&mut rng);
        for &(cx, cy) in cells.iter().take(m) {
            let px = ((cx as f64 + rng.gen_range(0.2..0.8)) * w as f64 / gx as f64).min(w as f64 - 1.0);
            let py = ((cy as f64 + rng.gen_range(0.2..0.8)) * h as f64 / gy as f64).min(h as f64 - 1.0);
            let (ix, iy) = (px as usize, py as usize);
            let z = views.depth[v].get(ix, iy);
            let pc = [(px - cam.cx) * z / cam.fx, (py - cam.cy) * z / cam.fy, z];
            // World point: R^T (p_c - t)
            let d = [pc[0] - cam.translation[0], pc[1] - cam.translation[1], pc[2] - cam.translation[2]];
            let r = &cam.rotation;
            let world = [0, 1, 2].map(|j| r[0][j] * d[0] + r[1][j] * d[1] + r[2][j] * d[2]);
            let footprint = 0.6 * z * (w as f64 / gx as f64).max(h as f64 / gy as f64) / cam.fx;
            let color = views.images[v].get(ix, iy);
            cloud.push(GaussianPrimitive::isotropic(world, footprint, 0.5, color));
        }
    }
    cloud
}

/// Profile of a set of images from the mean of their per-image class probabilities.
pub fn water_profile(images: &[ColorField], cw: &ClassifierWeights) -> Result<WaterProfile> {
    if images.is_empty() {
        return Err(invalid("water_profile: no images"));
    }
    let mut probs = [0.0; 3];
    let mut bg = 0.0;
    for img in images {
        let p = classify_water(img, cw)?;
        for c in 0..3 {
            probs[c] += p.probs[c] / images.len() as f64;
        }
        bg += p.bg_ratio / images.len() as f64;
    }
    Ok(WaterProfile::from_probs(probs, bg))
}

/// Initial parameter vector: Gaussians, medium parameters and classifier.
pub fn initial_params(cloud: &[GaussianPrimitive], cfg: &TrainConfig, cw: &ClassifierWeights) -> ParamVector {
    let pi = &cfg.physics_init;
    let mut p = ParamVector::new();
    cloud_to_params(cloud, &mut p);
    AttenuationParams::from_beta(pi.beta, [1.0; 3], pi.gamma).write(&mut p);
    ScatterParams::init(cfg.seed ^ 0x5ca7, pi.b_inf, pi.b, pi.lambda, pi.delta).write(&mut p);
    cw.write(&mut p);
    p
}

/// Forward model handles for one view.
pub struct ViewModel {
    pub j_hat: Var,
    pub depth: Var,
    pub alpha: Var,
    pub attenuation: Var,
    pub backscatter: Var,
    pub scatter_opacity: Var,
    pub edge: Var,
    /// `J A + B`
    pub degraded: Var,
}

/// Renders a view and applies the medium model.
pub fn view_model(t: &mut Tape, vars: &ParamVars, cam: &Camera, observed: Var, profile: &WaterProfile, cfg: &TrainConfig) -> ViewModel {
    let r = rasterize_var(t, vars, cam, &cfg.render);
    let depth = if cfg.detach_depth { t.detach(r.depth) } else { r.depth };
    let edge = edge_factor_var(t, observed, depth);
    let edge = if cfg.detach_edge { t.detach(edge) } else { edge };
    let t_mod = t.scalar(profile.t_mod());
    let attenuation = attenuation_map_var(t, depth, edge, vars, t_mod);
    let s = scattering_map_var(t, depth, vars, &cfg.scatter);
    let direct = t.mul(r.color, attenuation);
    let degraded = t.add(direct, s.backscatter);
    ViewModel {
        j_hat: r.color,
        depth,
        alpha: r.alpha,
        attenuation,
        backscatter: s.backscatter,
        scatter_opacity: s.opacity,
        edge,
        degraded,
    }
}

/// Keeps parameters in their valid ranges after an optimizer step.
pub fn project(params: &mut ParamVector) {
    if params.contains(SLOT_ROTATION) {
        for q in params.get_mut(SLOT_ROTATION).chunks_exact_mut(4) {
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 1e-12 {
                q.iter_mut().for_each(|v| *v /= n);
            } else {
                q.copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
            }
        }
    }
    let clamp = |p: &mut ParamVector, slot: &str, lo: f64, hi: f64| {
        if p.contains(slot) {
            p.get_mut(slot).iter_mut().for_each(|v| *v = v.clamp(lo, hi));
        }
    };
    clamp(params, SLOT_COLOR, 0.0, f64::INFINITY);
    clamp(params, SLOT_W, 0.0, f64::INFINITY);
    clamp(params, SLOT_GAMMA, 0.0, 1.0);
    clamp(params, SLOT_LAMBDA, 0.0, 1.0);
    clamp(params, SLOT_DELTA, 0.0, f64::INFINITY);
}

/// Mean PSNR of the synthesized image over all views (plain Gaussian render
/// before the water path is enabled).
pub fn evaluate_views(params: &ParamVector, views: &TrainViews, profile: &WaterProfile, cfg: &TrainConfig, water: bool) -> Result<f64> {
    let mut sum = 0.0;
    for (cam, img) in views.cameras.iter().zip(views.images) {
        let out = if water {
            let mut t = Tape::new();
            let vars = ParamVars::load(&mut t, params, false);
            let obs = color_const(&mut t, img);
            let m = view_model(&mut t, &vars, cam, obs, profile, cfg);
            crate::diff::to_color_field(&t, m.degraded)
        } else {
            rasterize(&cloud_from_params(params)?, cam, &cfg.render).color
        };
        sum += psnr(&out, img)?;
    }
    Ok(sum / views.cameras.len() as f64)
}

struct Step {
    breakdown: LossBreakdown,
    grads: ParamVector,
}

fn train_step(params: &ParamVector, views: &TrainViews, v: usize, profile: &WaterProfile, cfg: &TrainConfig, sched: &TrainingSchedule) -> Result<Step> {
    let mut t = Tape::new();
    let vars = ParamVars::load(&mut t, params, true);
    let target = color_const(&mut t, &views.images[v]);
    let (loss, breakdown) = if sched.water_path_enabled {
        let m = view_model(&mut t, &vars, &views.cameras[v], target, profile, cfg);
        let x = ObjectiveInputs {
            j_hat: m.j_hat,
            attenuation: m.attenuation,
            backscatter: m.backscatter,
            scatter_opacity: m.scatter_opacity,
            depth: m.depth,
            target,
            frozen: None,
        };
        let lv = objective_var(&mut t, &x, profile.w, cfg.render.d_far, &cfg.weights);
        (lv.total, lv.breakdown(&t))
    } else {
        let r = rasterize_var(&mut t, &vars, &views.cameras[v], &cfg.render);
        let l = l_basic_var(&mut t, r.color, target);
        let b = t.scalar_value(l);
        (l, LossBreakdown { basic: b, total: b, ..Default::default() })
    };
    if !breakdown.total.is_finite() {
        return Err(Error::Diverged(format!("non-finite loss on view {v}")));
    }
    let g = t.backward(loss);
    let mut grads = params.zeros_like();
    for s in params.slots() {
        grads.get_mut(&s.name).copy_from_slice(&g.get(vars.get(&s.name)));
    }
    Ok(Step { breakdown, grads })
}

fn apply_group(params: &mut ParamVector, grads: &ParamVector, state: &mut AdamState, prefix: &str, lr: impl Fn(&str) -> f64) -> Result<()> {
    let mut sub = params.subset(prefix);
    let g = grads.subset(prefix);
    adam_step_with(&mut sub, &g, state, lr)?;
    params.merge(&sub);
    Ok(())
}

/// Two-phase training: Gaussians alone on `l_basic`, then every group on the
/// full objective once the water path is enabled.
pub fn train(views: &TrainViews, cfg: &TrainConfig, cw: &ClassifierWeights) -> Result<TrainOutcome> {
    cfg.validate()?;
    views.validate()?;
    let profile = water_profile(views.images, cw)?;
    let cloud = init_cloud(views, cfg.n_gaussians, cfg.seed);
    let mut params = initial_params(&cloud, cfg, cw);
    let mut states = [GROUP_GAUSSIANS, GROUP_ATTENUATION, GROUP_SCATTER].map(|g| AdamState::new(&params.subset(g)));
    let mut log = Vec::new();
    let total = cfg.iterations;
    let mut good = Checkpoint { params: params.clone(), iteration: 0, profile, config: cfg.clone() };
    for iter in 0..total {
        let sched = controller(&profile, iter, total, &cfg.controller, &cfg.weights)?;
        let v = iter % views.cameras.len();
        let step = match train_step(&params, views, v, &profile, cfg, &sched) {
            Ok(s) => s,
            Err(Error::Diverged(msg)) => return Ok(diverged(good, log, iter, msg)),
            Err(e) => return Err(e),
        };
        let lrs = cfg.lrs;
        let updates = [
            (GROUP_GAUSSIANS, sched.lr_gaussians, 0),
            (GROUP_ATTENUATION, sched.lr_attenuation, 1),
            (GROUP_SCATTER, sched.lr_scattering, 2),
        ];
        for (prefix, lr, k) in updates {
            if lr <= 0.0 {
                continue;
            }
            let res = if k == 0 {
                apply_group(&mut params, &step.grads, &mut states[k], prefix, |s| lr * lrs.for_slot(s))
            } else {
                apply_group(&mut params, &step.grads, &mut states[k], prefix, |_| lr)
            };
            if let Err(Error::Diverged(msg)) = res {
                return Ok(diverged(good, log, iter, msg));
            }
            res?;
        }
        project(&mut params);
        if params.data().iter().any(|v| !v.is_finite()) {
            return Ok(diverged(good, log, iter, "non-finite parameters after update".into()));
        }
        good = Checkpoint { params: params.clone(), iteration: iter + 1, profile, config: cfg.clone() };
        if (iter + 1) % cfg.eval_interval == 0 || iter + 1 == total {
            let psnr = evaluate_views(&params, views, &profile, cfg, sched.water_path_enabled)?;
            log.push(LogRow::new(iter + 1, &step.breakdown, psnr));
            log::info!("iter {} total {:.5} psnr {:.2}", iter + 1, step.breakdown.total, psnr);
        }
    }
    Ok(TrainOutcome { checkpoint: good, log, diverged: None })
}

fn diverged(good: Checkpoint, log: Vec<LogRow>, iter: usize, msg: String) -> TrainOutcome {
    log::warn!("diverged at iteration {iter}: {msg}");
    TrainOutcome { checkpoint: good, log, diverged: Some(format!("iteration {iter}: {msg}")) }
}
