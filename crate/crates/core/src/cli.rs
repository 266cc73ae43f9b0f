//! Command-line entry point: config resolution, subcommands and exit codes.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgMatches, Command};
use serde::{Deserialize, Serialize};

use crate::adapt::{ControllerConfig, WaterClass};
use crate::diff::{append_csv, color_const, to_color_field, to_scalar_field, ParamVars, Tape};
use crate::error::{Error, Result};
use crate::field::{ColorField, ScalarField};
use crate::gate::{gradient_gate, GATE_SEEDS, GATE_STEP, GATE_TOL};
use crate::io;
use crate::losses::{psnr, ssim, LossWeights};
use crate::renderer::RenderConfig;
use crate::scattering::{depth_confidence, multiscale_features, ScatterConfig};
use crate::synth::{default_classifier, generate_scene, SceneSpec};
use crate::train::{restore, train, view_model, GaussianLrs, PhysicsInit, TrainConfig, TrainViews};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_GATE: i32 = 4;

pub const THREADS_ENV: &str = "DPGS_THREADS";
pub const RESOLVED: &str = "resolved.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.dpgs";
pub const LOG_FILE: &str = "train_log.csv";

/// Flat run configuration shared by every subcommand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out: Option<PathBuf>,
    pub seed: u64,

    pub class: WaterClass,
    pub n_gaussians: usize,
    pub width: usize,
    pub height: usize,
    pub n_views: usize,
    pub d_min: f64,
    pub d_max: f64,
    pub beta: Option<[f64; 3]>,
    pub b: Option<f64>,
    pub b_inf: Option<[f64; 3]>,

    pub bundle: Option<PathBuf>,
    pub iterations: usize,
    pub train_gaussians: usize,
    pub eval_interval: usize,
    pub enable_fraction: f64,
    pub lr_physics_start: f64,
    pub lr_physics_end: f64,
    pub cap_attenuation: f64,
    pub cap_scattering: f64,
    pub lr_position: f64,
    pub lr_color: f64,
    pub lr_opacity: f64,
    pub lr_scale: f64,
    pub lr_rotation: f64,
    pub w: [f64; 5],
    pub mu: f64,
    pub lambda_edge: f64,
    pub alpha_s: f64,
    pub lambda_ms: f64,
    pub gamma_wat: f64,
    pub init_beta: [f64; 3],
    pub init_gamma: f64,
    pub init_b: f64,
    pub init_b_inf: [f64; 3],
    pub init_lambda: f64,
    pub init_delta: f64,
    pub sigma_c: f64,
    pub use_confidence: bool,
    pub use_edge: bool,
    pub use_multiscale: bool,
    pub detach_depth: bool,
    pub detach_edge: bool,

    pub checkpoint: Option<PathBuf>,
    pub cameras: Option<PathBuf>,
    pub view: usize,
    pub image: Option<PathBuf>,
    pub depth: Option<PathBuf>,
    pub a_min: f64,

    pub pred: Option<PathBuf>,
    pub reference: Option<PathBuf>,

    pub fd_step: f64,
    pub gate_seeds: Vec<u64>,
    pub gate_tol: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let (c, l, p, s) = (t.controller, t.weights, t.physics_init, t.scatter);
        Self {
            out: None,
            seed: 0,
            class: WaterClass::Turbid,
            n_gaussians: 200,
            width: 96,
            height: 96,
            n_views: 8,
            d_min: 2.5,
            d_max: 7.0,
            beta: None,
            b: None,
            b_inf: None,
            bundle: None,
            iterations: t.iterations,
            train_gaussians: t.n_gaussians,
            eval_interval: t.eval_interval,
            enable_fraction: c.enable_fraction,
            lr_physics_start: c.lr_physics_start,
            lr_physics_end: c.lr_physics_end,
            cap_attenuation: c.cap_attenuation,
            cap_scattering: c.cap_scattering,
            lr_position: t.lrs.position,
            lr_color: t.lrs.color,
            lr_opacity: t.lrs.opacity,
            lr_scale: t.lrs.scale,
            lr_rotation: t.lrs.rotation,
            w: l.w,
            mu: l.mu,
            lambda_edge: l.lambda_edge,
            alpha_s: l.alpha_s,
            lambda_ms: l.lambda_ms,
            gamma_wat: l.gamma_wat,
            init_beta: p.beta,
            init_gamma: p.gamma,
            init_b: p.b,
            init_b_inf: p.b_inf,
            init_lambda: p.lambda,
            init_delta: p.delta,
            sigma_c: s.sigma_c,
            use_confidence: s.use_confidence,
            use_edge: s.use_edge,
            use_multiscale: s.use_multiscale,
            detach_depth: t.detach_depth,
            detach_edge: t.detach_edge,
            checkpoint: None,
            cameras: None,
            view: 0,
            image: None,
            depth: None,
            a_min: 1e-3,
            pred: None,
            reference: None,
            fd_step: GATE_STEP,
            gate_seeds: GATE_SEEDS.to_vec(),
            gate_tol: GATE_TOL,
        }
    }
}

fn key_err(key: &str, message: impl Into<String>) -> Error {
    Error::Config { key: key.to_string(), message: message.into() }
}

fn require<'a>(v: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    v.as_deref().ok_or_else(|| key_err(key, "required for this command"))
}

impl RunConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            n_gaussians: self.train_gaussians,
            seed: self.seed,
            eval_interval: self.eval_interval,
            lrs: GaussianLrs {
                position: self.lr_position,
                color: self.lr_color,
                opacity: self.lr_opacity,
                scale: self.lr_scale,
                rotation: self.lr_rotation,
            },
            controller: ControllerConfig {
                enable_fraction: self.enable_fraction,
                lr_physics_start: self.lr_physics_start,
                lr_physics_end: self.lr_physics_end,
                cap_attenuation: self.cap_attenuation,
                cap_scattering: self.cap_scattering,
            },
            weights: LossWeights {
                w: self.w,
                mu: self.mu,
                lambda_edge: self.lambda_edge,
                alpha_s: self.alpha_s,
                lambda_ms: self.lambda_ms,
                gamma_wat: self.gamma_wat,
                ..LossWeights::default()
            },
            physics_init: PhysicsInit {
                beta: self.init_beta,
                gamma: self.init_gamma,
                b: self.init_b,
                b_inf: self.init_b_inf,
                lambda: self.init_lambda,
                delta: self.init_delta,
            },
            scatter: ScatterConfig {
                sigma_c: self.sigma_c,
                use_confidence: self.use_confidence,
                use_edge: self.use_edge,
                use_multiscale: self.use_multiscale,
            },
            render: RenderConfig::default(),
            detach_depth: self.detach_depth,
            detach_edge: self.detach_edge,
        }
    }

    pub fn scene_spec(&self) -> SceneSpec {
        let mut spec = SceneSpec::sample(self.class, self.seed, self.n_gaussians, self.width, self.height, self.n_views);
        spec.d_min = self.d_min;
        spec.d_max = self.d_max;
        if let Some(beta) = self.beta {
            spec.beta = beta;
        }
        if let Some(b) = self.b {
            spec.b = b;
        }
        if let Some(b_inf) = self.b_inf {
            spec.b_inf = b_inf;
        }
        spec
    }

    /// Range checks, reported against the offending key.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_physics_start", self.lr_physics_start),
            ("lr_physics_end", self.lr_physics_end),
            ("cap_attenuation", self.cap_attenuation),
            ("cap_scattering", self.cap_scattering),
            ("lr_position", self.lr_position),
            ("lr_color", self.lr_color),
            ("lr_opacity", self.lr_opacity),
            ("lr_scale", self.lr_scale),
            ("lr_rotation", self.lr_rotation),
            ("sigma_c", self.sigma_c),
            ("a_min", self.a_min),
            ("fd_step", self.fd_step),
            ("gate_tol", self.gate_tol),
            ("d_min", self.d_min),
        ];
        for (k, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(key_err(k, format!("must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("mu", self.mu),
            ("lambda_edge", self.lambda_edge),
            ("alpha_s", self.alpha_s),
            ("lambda_ms", self.lambda_ms),
            ("gamma_wat", self.gamma_wat),
            ("init_b", self.init_b),
            ("init_delta", self.init_delta),
        ];
        for (k, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(key_err(k, format!("must be non-negative, got {v}")));
            }
        }
        if !(self.enable_fraction > 0.0 && self.enable_fraction < 1.0) {
            return Err(key_err("enable_fraction", format!("must lie in (0, 1), got {}", self.enable_fraction)));
        }
        for (k, v) in [("init_gamma", self.init_gamma), ("init_lambda", self.init_lambda)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(key_err(k, format!("must lie in [0, 1], got {v}")));
            }
        }
        if self.w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(key_err("w", "weights must be finite and non-negative"));
        }
        if self.init_beta.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(key_err("init_beta", "must be positive"));
        }
        if self.init_b_inf.iter().any(|v| !(*v > 0.0 && *v < 1.0)) {
            return Err(key_err("init_b_inf", "must lie in (0, 1)"));
        }
        if !(self.d_max > self.d_min && self.d_max.is_finite()) {
            return Err(key_err("d_max", format!("must exceed d_min, got {}", self.d_max)));
        }
        for (k, v) in [("width", self.width), ("height", self.height)] {
            if v < 8 {
                return Err(key_err(k, format!("must be at least 8, got {v}")));
            }
        }
        for (k, v) in [("n_gaussians", self.n_gaussians), ("n_views", self.n_views), ("train_gaussians", self.train_gaussians), ("eval_interval", self.eval_interval)] {
            if v == 0 {
                return Err(key_err(k, "must be at least 1"));
            }
        }
        if self.gate_seeds.is_empty() {
            return Err(key_err("gate_seeds", "needs at least one seed"));
        }
        Ok(())
    }
}

struct Key {
    name: &'static str,
    commands: &'static [&'static str],
    /// Flag values are taken verbatim rather than parsed as TOML.
    text: bool,
    help: &'static str,
}

const ALL: &[&str] = &["synth", "train", "render", "restore", "eval", "gradcheck"];
const SYNTH: &[&str] = &["synth"];
const TRAIN: &[&str] = &["train"];
const SYNTH_TRAIN: &[&str] = &["synth", "train"];
const RENDER: &[&str] = &["render"];
const TRAIN_RENDER: &[&str] = &["train", "render"];
const RENDER_RESTORE: &[&str] = &["render", "restore"];
const RESTORE: &[&str] = &["restore"];
const EVAL: &[&str] = &["eval"];
const GATE: &[&str] = &["gradcheck"];

const fn key(name: &'static str, commands: &'static [&'static str], help: &'static str) -> Key {
    Key { name, commands, text: false, help }
}

const fn text(name: &'static str, commands: &'static [&'static str], help: &'static str) -> Key {
    Key { name, commands, text: true, help }
}

const KEYS: &[Key] = &[
    text("out", ALL, "output directory"),
    key("seed", SYNTH_TRAIN, "random seed"),
    text("class", SYNTH, "water class: clear, medium or turbid"),
    key("n_gaussians", SYNTH, "Gaussians in the synthetic relief"),
    key("width", SYNTH, "image width in pixels"),
    key("height", SYNTH, "image height in pixels"),
    key("n_views", SYNTH, "number of views"),
    key("d_min", SYNTH, "nearest scene depth"),
    key("d_max", SYNTH, "farthest scene depth"),
    key("beta", SYNTH, "attenuation coefficients [r, g, b]; sampled from the class when unset"),
    key("b", SYNTH, "backscatter coefficient; sampled from the class when unset"),
    key("b_inf", SYNTH, "veiling light [r, g, b]; sampled from the class when unset"),
    text("bundle", TRAIN_RENDER, "scene bundle directory"),
    key("iterations", TRAIN, "total training iterations"),
    key("train_gaussians", TRAIN, "Gaussians initialized from depth"),
    key("eval_interval", TRAIN, "iterations between log rows"),
    key("enable_fraction", TRAIN, "fraction of iterations before the water path turns on"),
    key("lr_physics_start", TRAIN, "physics learning rate at enable time"),
    key("lr_physics_end", TRAIN, "clear-water physics learning rate at the end"),
    key("cap_attenuation", TRAIN, "attenuation learning-rate cap"),
    key("cap_scattering", TRAIN, "scattering learning-rate cap"),
    key("lr_position", TRAIN, "Gaussian position learning rate"),
    key("lr_color", TRAIN, "Gaussian color learning rate"),
    key("lr_opacity", TRAIN, "Gaussian opacity learning rate"),
    key("lr_scale", TRAIN, "Gaussian scale learning rate"),
    key("lr_rotation", TRAIN, "Gaussian rotation learning rate"),
    key("w", TRAIN, "loss term weights [basic, ab, wat, edge, ms]"),
    key("mu", TRAIN, "depth-transmittance coupling weight"),
    key("lambda_edge", TRAIN, "backscatter smoothness weight"),
    key("alpha_s", TRAIN, "depth-edge sharpness"),
    key("lambda_ms", TRAIN, "multiscale consistency weight"),
    key("gamma_wat", TRAIN, "weight of the depth-transmittance term inside the water loss"),
    key("init_beta", TRAIN, "initial attenuation coefficients"),
    key("init_gamma", TRAIN, "initial edge modulation"),
    key("init_b", TRAIN, "initial backscatter coefficient"),
    key("init_b_inf", TRAIN, "initial veiling light"),
    key("init_lambda", TRAIN, "initial depth-edge modulation"),
    key("init_delta", TRAIN, "initial multiscale modulation"),
    key("sigma_c", TRAIN, "depth-confidence scale"),
    key("use_confidence", TRAIN, "enable the depth-confidence modulator"),
    key("use_edge", TRAIN, "enable the depth-edge modulator"),
    key("use_multiscale", TRAIN, "enable the multiscale modulator"),
    key("detach_depth", TRAIN, "stop physics gradients through rendered depth"),
    key("detach_edge", TRAIN, "stop gradients through the edge factor"),
    text("checkpoint", RENDER_RESTORE, "checkpoint file"),
    text("cameras", RENDER, "cameras.json; defaults to <bundle>/cameras.json"),
    key("view", RENDER, "camera index"),
    text("image", RENDER_RESTORE, "observed image (restore input; render edge guide)"),
    text("depth", RESTORE, "depth map (PFM)"),
    key("a_min", RESTORE, "attenuation floor for inversion"),
    text("pred", EVAL, "directory of predicted PNGs"),
    text("reference", EVAL, "directory of reference PNGs"),
    key("fd_step", GATE, "central-difference step"),
    key("gate_seeds", GATE, "case seeds"),
    key("gate_tol", GATE, "maximum relative error"),
];

const COMMANDS: &[(&str, &str)] = &[
    ("synth", "Write a synthetic scene bundle"),
    ("train", "Train on a bundle; writes a checkpoint and train_log.csv"),
    ("render", "Render a view and dump the medium fields"),
    ("restore", "Invert the medium model on an observed image"),
    ("eval", "PSNR and SSIM of matching PNGs in two directories"),
    ("gradcheck", "Finite-difference gradient gate; exit 4 on failure"),
];

fn default_table() -> toml::Table {
    toml::Table::try_from(RunConfig::default()).expect("defaults serialize")
}

pub fn command() -> Command {
    let defaults = default_table();
    let mut root = Command::new("uwsplat")
        .about("Differentiable underwater scene reconstruction")
        .after_help(format!("Environment: {THREADS_ENV} bounds worker threads (0 = auto).\nExit codes: 0 ok, 2 usage, 3 divergence, 4 gradient gate failure."))
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, about) in COMMANDS {
        let mut sc = Command::new(*name).about(*about).arg(Arg::new("config").long("config").value_name("FILE").help("TOML config; flags override its values"));
        for k in KEYS.iter().filter(|k| k.commands.contains(name)) {
            let default = defaults.get(k.name).map(|v| v.to_string()).unwrap_or_else(|| "unset".into());
            sc = sc.arg(Arg::new(k.name).long(k.name).value_name("VALUE").help(format!("{} [default: {default}]", k.help)));
        }
        root = root.subcommand(sc);
    }
    root
}

fn flag_value(k: &Key, raw: &str) -> toml::Value {
    if k.text {
        return toml::Value::String(raw.to_string());
    }
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Merges defaults, an optional file and `(key, raw value)` flag overrides,
/// in increasing precedence.
pub fn resolve(file: Option<&Path>, flags: &[(String, String)]) -> Result<RunConfig> {
    let mut table = match file {
        Some(p) => {
            let s = fs::read_to_string(p).map_err(|e| key_err("config", format!("{}: {e}", p.display())))?;
            toml::from_str::<toml::Table>(&s).map_err(|e| key_err("config", format!("{}: {}", p.display(), e.message())))?
        }
        None => toml::Table::new(),
    };
    for (name, raw) in flags {
        let k = KEYS.iter().find(|k| k.name == name).ok_or_else(|| key_err(name, "unknown key"))?;
        table.insert(name.clone(), flag_value(k, raw));
    }
    for (name, value) in &table {
        if !KEYS.iter().any(|k| k.name == name) {
            return Err(key_err(name, "unknown key"));
        }
        let mut single = toml::Table::new();
        single.insert(name.clone(), value.clone());
        if let Err(e) = RunConfig::deserialize(toml::Value::Table(single)) {
            return Err(key_err(name, e.message().to_string()));
        }
    }
    let cfg = RunConfig::deserialize(toml::Value::Table(table)).map_err(|e| key_err("config", e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn to_toml(cfg: &RunConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::Format(e.to_string()))
}

fn prepare_out(cfg: &RunConfig) -> Result<PathBuf> {
    let out = require(&cfg.out, "out")?.to_path_buf();
    fs::create_dir_all(&out)?;
    fs::write(out.join(RESOLVED), to_toml(cfg)?)?;
    Ok(out)
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().map_err(|_| key_err(THREADS_ENV, format!("expected a non-negative integer, got `{raw}`")))?;
    if n > 0 {
        // A pool built earlier in this process wins; that is not an error.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn run_synth(cfg: &RunConfig) -> Result<i32> {
    let out = prepare_out(cfg)?;
    let bundle = generate_scene(&cfg.scene_spec())?;
    io::write_bundle(&out, &bundle)?;
    println!("wrote {} views to {}", bundle.cameras.len(), out.display());
    Ok(EXIT_OK)
}

fn run_train(cfg: &RunConfig) -> Result<i32> {
    let bundle = io::read_bundle(require(&cfg.bundle, "bundle")?)?;
    let out = prepare_out(cfg)?;
    let views = TrainViews { cameras: &bundle.cameras, images: &bundle.degraded, depth: &bundle.depth };
    let outcome = train(&views, &cfg.train_config(), &default_classifier()?)?;
    io::write_checkpoint(&out.join(CHECKPOINT_FILE), &outcome.checkpoint)?;
    io::write_log_csv(&out.join(LOG_FILE), &outcome.log)?;
    if let Some(last) = outcome.log.last() {
        println!("iteration {} psnr {:.3} total {:.6}", last.iter, last.psnr, last.total);
    }
    match outcome.diverged {
        Some(msg) => {
            eprintln!("diverged: {msg}; kept checkpoint from iteration {}", outcome.checkpoint.iteration);
            Ok(EXIT_DIVERGED)
        }
        None => Ok(EXIT_OK),
    }
}

fn run_render(cfg: &RunConfig) -> Result<i32> {
    let ck = io::read_checkpoint(require(&cfg.checkpoint, "checkpoint")?)?;
    let cam_path = match (&cfg.cameras, &cfg.bundle) {
        (Some(p), _) => p.clone(),
        (None, Some(b)) => b.join("cameras.json"),
        (None, None) => return Err(key_err("cameras", "required for this command")),
    };
    let cameras = io::read_cameras(&cam_path)?;
    let cam = cameras.get(cfg.view).ok_or_else(|| key_err("view", format!("only {} cameras available", cameras.len())))?;
    let out = prepare_out(cfg)?;
    let guide = match &cfg.image {
        Some(p) => Some(io::read_png(p)?),
        None => None,
    };
    let tcfg = &ck.config;
    let mut t = Tape::new();
    let vars = ParamVars::load(&mut t, &ck.params, false);
    let observed = match &guide {
        Some(img) => {
            if img.dims() != (cam.width, cam.height) {
                return Err(key_err("image", "dimensions differ from the camera"));
            }
            color_const(&mut t, img)
        }
        None => crate::renderer::rasterize_var(&mut t, &vars, cam, &tcfg.render).color,
    };
    let m = view_model(&mut t, &vars, cam, observed, &ck.profile, tcfg);
    let depth = to_scalar_field(&t, m.depth);
    let j_hat = to_color_field(&t, m.j_hat);
    let degraded = to_color_field(&t, m.degraded);
    let atten = to_color_field(&t, m.attenuation);
    let back = to_color_field(&t, m.backscatter);
    io::write_png(&out.join("j_hat.png"), &j_hat)?;
    io::write_png(&out.join("degraded.png"), &degraded)?;
    io::write_png(&out.join("attenuation.png"), &atten)?;
    io::write_png(&out.join("backscatter.png"), &back)?;
    io::write_pfm_color(&out.join("attenuation.pfm"), &atten)?;
    io::write_pfm_color(&out.join("backscatter.pfm"), &back)?;
    io::write_pfm(&out.join("depth.pfm"), &depth)?;
    io::write_pfm(&out.join("alpha.pfm"), &to_scalar_field(&t, m.alpha))?;
    io::write_pfm(&out.join("scatter_opacity.pfm"), &to_scalar_field(&t, m.scatter_opacity))?;
    io::write_pfm(&out.join("edge.pfm"), &to_scalar_field(&t, m.edge))?;
    io::write_pfm(&out.join("confidence.pfm"), &depth_confidence(&depth, tcfg.scatter.sigma_c)?)?;
    if depth.width >= 8 && depth.height >= 8 {
        io::write_pfm(&out.join("multiscale.pfm"), &multiscale_features(&depth, &ck.scatter()?)?)?;
    }
    println!("rendered view {} to {}", cfg.view, out.display());
    Ok(EXIT_OK)
}

fn run_restore(cfg: &RunConfig) -> Result<i32> {
    let ck = io::read_checkpoint(require(&cfg.checkpoint, "checkpoint")?)?;
    let image = io::read_png(require(&cfg.image, "image")?)?;
    let depth = io::read_pfm(require(&cfg.depth, "depth")?)?;
    let out = prepare_out(cfg)?;
    let r = restore(&image, &depth, &ck.attenuation()?, &ck.scatter()?, &ck.config.scatter, &ck.profile, cfg.a_min)?;
    io::write_png(&out.join("restored.png"), &r.image)?;
    io::write_pfm_color(&out.join("restored.pfm"), &r.image)?;
    let mask = ScalarField::new(depth.width, depth.height, r.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect())?;
    io::write_pfm(&out.join("mask.pfm"), &mask)?;
    println!("restored {} pixels, {} masked", r.mask.len(), r.mask.iter().filter(|m| **m).count());
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct EvalRow {
    file: String,
    psnr: f64,
    ssim: f64,
}

fn run_eval(cfg: &RunConfig) -> Result<i32> {
    let pred_dir = require(&cfg.pred, "pred")?;
    let ref_dir = require(&cfg.reference, "reference")?;
    let out = prepare_out(cfg)?;
    let mut rows = Vec::new();
    for p in io::list_pngs(pred_dir)? {
        let name = p.file_name().expect("listed file").to_string_lossy().to_string();
        let r = ref_dir.join(&name);
        if !r.exists() {
            log::warn!("no reference for {name}");
            continue;
        }
        let (a, b): (ColorField, ColorField) = (io::read_png(&p)?, io::read_png(&r)?);
        rows.push(EvalRow { file: name, psnr: psnr(&a, &b)?, ssim: ssim(&a, &b)? });
    }
    if rows.is_empty() {
        return Err(key_err("pred", "no PNG in pred has a matching reference"));
    }
    let n = rows.len() as f64;
    let mean = EvalRow { file: "mean".into(), psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n, ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n };
    println!("{} images: psnr {:.3} ssim {:.4}", rows.len(), mean.psnr, mean.ssim);
    rows.push(mean);
    let path = out.join("eval.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Format(e.to_string()))?;
    for r in &rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(EXIT_OK)
}

fn run_gradcheck(cfg: &RunConfig) -> Result<i32> {
    let out = prepare_out(cfg)?;
    let reports = gradient_gate(&cfg.gate_seeds, cfg.fd_step)?;
    let csv_path = out.join("gradcheck.csv");
    if csv_path.exists() {
        fs::remove_file(&csv_path)?;
    }
    append_csv(&csv_path, &reports)?;
    let mut failed = 0;
    for r in &reports {
        let ok = r.passes(cfg.gate_tol);
        failed += usize::from(!ok);
        println!("{:<28} {:>10.3e} {:<32} {}", r.op, r.max_rel_err, r.argmax_slot, if ok { "pass" } else { "FAIL" });
    }
    println!("{} of {} cases pass (tol {:e})", reports.len() - failed, reports.len(), cfg.gate_tol);
    Ok(if failed == 0 { EXIT_OK } else { EXIT_GATE })
}

fn flags_from(m: &ArgMatches, name: &str) -> Vec<(String, String)> {
    KEYS.iter()
        .filter(|k| k.commands.contains(&name))
        .filter_map(|k| m.get_one::<String>(k.name).map(|v| (k.name.to_string(), v.clone())))
        .collect()
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::InvalidArgument(_) => EXIT_USAGE,
        Error::Diverged(_) => EXIT_DIVERGED,
        _ => EXIT_FAILURE,
    }
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let result = configure_threads()
        .and_then(|_| resolve(sub.get_one::<String>("config").map(Path::new), &flags_from(sub, name)))
        .and_then(|cfg| match name {
            "synth" => run_synth(&cfg),
            "train" => run_train(&cfg),
            "render" => run_render(&cfg),
            "restore" => run_restore(&cfg),
            "eval" => run_eval(&cfg),
            "gradcheck" => run_gradcheck(&cfg),
            other => unreachable!("unhandled subcommand {other}"),
        });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
