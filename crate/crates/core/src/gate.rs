//! Finite-difference gradient gate over every differentiable operation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapt::{classify_var, ClassifierWeights};
use crate::attenuation::{attenuation_map_var, edge_factor_var, AttenuationParams};
use crate::diff::{color_const, grad_check, GradReport, ParamVector, Shape};
use crate::error::Result;
use crate::field::{ColorField, ScalarField};
use crate::losses::{l_ab_var, l_basic_var, l_edge_var, l_ms_var, objective_var, LossWeights, ObjectiveInputs};
use crate::renderer::{cloud_to_params, rasterize_var, Camera, GaussianPrimitive, RenderConfig};
use crate::scattering::{multiscale_features_var, scattering_map_var, ScatterConfig, ScatterParams};

pub const GATE_SEEDS: [u64; 3] = [2, 3, 4];
pub const GATE_STEP: f64 = 1e-4;
pub const GATE_TOL: f64 = 1e-4;

/// Operations covered by [`gradient_gate`].
pub const GATE_OPS: [&str; 10] =
    ["rasterize", "attenuation_map", "multiscale_features", "scattering_map", "l_basic", "l_ab", "l_edge", "l_ms", "l_total", "classify_water"];

const N: usize = 8;

fn noise_color(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> ColorField {
    ColorField::from_fn(N, N, |_, _| [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)])
}

fn noise_scalar(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> ScalarField {
    ScalarField::from_fn(N, N, |_, _| rng.gen_range(lo..hi))
}

fn plane() -> Shape {
    Shape::plane(N, N)
}

fn color() -> Shape {
    Shape::new(3, N, N)
}

fn check_rasterize(seed: u64, step: f64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cloud: Vec<GaussianPrimitive> = (0..2)
        .map(|_| GaussianPrimitive {
            mean: [rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4), rng.gen_range(2.0..4.0)],
            rotation: [rng.gen_range(0.5..1.0), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)],
            log_scale: [rng.gen_range(-2.3..-1.2), rng.gen_range(-2.3..-1.2), rng.gen_range(-2.3..-1.2)],
            opacity: rng.gen_range(-1.0..2.0),
            color: [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)],
        })
        .collect();
    let mut p = ParamVector::new();
    cloud_to_params(&cloud, &mut p);
    let cam = Camera::look_at([0.0; 3], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0], 9.0, 9.0, N, N);
    let cfg = RenderConfig::default();
    let wc: Vec<f64> = (0..3 * N * N).map(|_| rng.gen_range(-0.5..1.0)).collect();
    let wd: Vec<f64> = (0..N * N).map(|_| rng.gen_range(0.0..0.1)).collect();
    grad_check(
        "rasterize",
        |t, v| {
            let r = rasterize_var(t, v, &cam, &cfg);
            let a = t.constant(wc.clone(), color());
            let a = t.dot(r.color, a);
            let d = t.constant(wd.clone(), plane());
            let d = t.dot(r.depth, d);
            let al = t.square(r.alpha);
            let al = t.sum(al);
            let s = t.add(a, d);
            Ok(t.add(s, al))
        },
        &p,
        step,
    )
}

fn check_attenuation(seed: u64, step: f64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let depth = noise_scalar(&mut rng, 2.0, 4.0);
    let img = noise_color(&mut rng, 0.1, 0.9);
    let mut p = AttenuationParams::from_beta([0.35, 0.15, 0.08], [1.1, 0.9, 1.0], 0.4).to_params();
    p.insert("depth", plane(), depth.data);
    grad_check(
        "attenuation_map",
        |t, v| {
            let i = color_const(t, &img);
            let d = v.get("depth");
            let e = edge_factor_var(t, i, d);
            let tm = t.scalar(1.1);
            let a = attenuation_map_var(t, d, e, v, tm);
            Ok(t.mean(a))
        },
        &p,
        step,
    )
}

fn scatter_case(seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 200);
    let depth = noise_scalar(&mut rng, 2.0, 3.0);
    let mut p = ScatterParams::init(seed, [0.2, 0.5, 0.6], 0.12, 0.4, 0.05).to_params();
    p.insert("depth", plane(), depth.data);
    p
}

fn check_multiscale(seed: u64, step: f64) -> Result<GradReport> {
    let p = scatter_case(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 300);
    let k: Vec<f64> = (0..N * N).map(|_| rng.gen_range(-1.0..1.0)).collect();
    grad_check(
        "multiscale_features",
        |t, v| {
            let m = multiscale_features_var(t, v.get("depth"), v);
            let k = t.constant(k.clone(), plane());
            Ok(t.dot(m, k))
        },
        &p,
        step,
    )
}

fn check_scattering(seed: u64, step: f64) -> Result<GradReport> {
    let p = scatter_case(seed);
    let cfg = ScatterConfig::default();
    grad_check(
        "scattering_map",
        |t, v| {
            let s = scattering_map_var(t, v.get("depth"), v, &cfg);
            let a = t.mean(s.backscatter);
            let b = t.mean(s.opacity);
            Ok(t.add(a, b))
        },
        &p,
        step,
    )
}

struct LossCase {
    params: ParamVector,
    target: ColorField,
}

fn loss_case(seed: u64) -> LossCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 400);
    let mut p = ParamVector::new();
    p.insert("j", color(), noise_color(&mut rng, 0.2, 0.8).to_planar());
    p.insert("a", color(), noise_color(&mut rng, 0.4, 0.9).to_planar());
    p.insert("b", color(), noise_color(&mut rng, 0.0, 0.2).to_planar());
    p.insert("bs", plane(), noise_scalar(&mut rng, 0.1, 0.5).data);
    p.insert("d", plane(), noise_scalar(&mut rng, 2.0, 5.0).data);
    LossCase { params: p, target: noise_color(&mut rng, 0.1, 0.9) }
}

fn check_loss(op: &str, seed: u64, step: f64) -> Result<GradReport> {
    let c = loss_case(seed);
    let w = LossWeights { w: [1.0; 5], ..LossWeights::default() };
    let d_far = 20.0;
    match op {
        "l_basic" => grad_check(
            op,
            |t, v| {
                let tg = color_const(t, &c.target);
                Ok(l_basic_var(t, v.get("j"), tg))
            },
            &c.params,
            step,
        ),
        "l_ab" => grad_check(
            op,
            |t, v| {
                let d = t.scale(v.get("d"), 1.0 / d_far);
                let a_mean = t.mean_channels(v.get("a"));
                let one_minus = t.rsub(1.0, v.get("bs"));
                let tm = t.mul(a_mean, one_minus);
                Ok(l_ab_var(t, v.get("bs"), v.get("a"), d, tm, w.mu))
            },
            &c.params,
            step,
        ),
        "l_edge" => grad_check(op, |t, v| Ok(l_edge_var(t, v.get("bs"), v.get("d"), w.lambda_edge, w.alpha_s)), &c.params, step),
        "l_ms" => grad_check(
            op,
            |t, v| {
                let tg = color_const(t, &c.target);
                let o = t.mul(v.get("j"), v.get("a"));
                let o = t.add(o, v.get("b"));
                Ok(l_ms_var(t, o, tg, w.lambda_ms))
            },
            &c.params,
            step,
        ),
        _ => {
            // Stop-gradient inputs are held at the base point so finite
            // differences see the same function the analytic rule does.
            let direct: Vec<f64> = c.params.get("j").iter().zip(c.params.get("a")).map(|(j, a)| j * a).collect();
            let back = c.params.get("b").to_vec();
            grad_check(
                op,
                |t, v| {
                    let tg = color_const(t, &c.target);
                    let x = ObjectiveInputs {
                        j_hat: v.get("j"),
                        attenuation: v.get("a"),
                        backscatter: v.get("b"),
                        scatter_opacity: v.get("bs"),
                        depth: v.get("d"),
                        target: tg,
                        frozen: Some((t.constant(direct.clone(), color()), t.constant(back.clone(), color()))),
                    };
                    Ok(objective_var(t, &x, 0.4, d_far, &w).total)
                },
                &c.params,
                step,
            )
        }
    }
}

fn check_classifier(seed: u64, step: f64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 500);
    let img = ColorField::from_fn(4, 4, |_, _| [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]);
    let mut p = ClassifierWeights::random(seed).to_params();
    p.insert("image", Shape::new(3, 4, 4), img.to_planar());
    grad_check(
        "classify_water",
        |t, v| {
            let probs = classify_var(t, v.get("image"), v);
            let k = t.constant(vec![0.3, -0.5, 0.9], Shape::vector(3));
            Ok(t.dot(probs, k))
        },
        &p,
        step,
    )
}

/// Runs one gate case.
pub fn check_op(op: &str, seed: u64, step: f64) -> Result<GradReport> {
    let mut r = match op {
        "rasterize" => check_rasterize(seed, step),
        "attenuation_map" => check_attenuation(seed, step),
        "multiscale_features" => check_multiscale(seed, step),
        "scattering_map" => check_scattering(seed, step),
        "classify_water" => check_classifier(seed, step),
        "l_basic" | "l_ab" | "l_edge" | "l_ms" | "l_total" => check_loss(op, seed, step),
        other => Err(crate::error::invalid(format!("unknown gate op `{other}`"))),
    }?;
    r.op = format!("{op}@{seed}");
    Ok(r)
}

/// Every op in [`GATE_OPS`] on every seed.
pub fn gradient_gate(seeds: &[u64], step: f64) -> Result<Vec<GradReport>> {
    let mut out = Vec::with_capacity(GATE_OPS.len() * seeds.len());
    for op in GATE_OPS {
        for &seed in seeds {
            out.push(check_op(op, seed, step)?);
        }
    }
    Ok(out)
}
