use serde::{Deserialize, Serialize};

use crate::adapt::WaterProfile;
use crate::attenuation::{attenuation_map_with_edge, attenuation_map_var, edge_factor, AttenuationParams, SLOT_THETA_BETA};
use crate::diff::{backward, color_const, scalar_const, ParamVars, ParamVector, Shape};
use crate::error::{invalid, Result};
use crate::field::{ColorField, ScalarField};
use crate::scattering::{scattering_map, scattering_map_var, ScatterConfig, ScatterParams, SLOT_B_INF, SLOT_THETA_B};

use super::{adam_step, AdamState};

#[derive(Clone, Debug, PartialEq)]
pub struct Restored {
    pub image: ColorField,
    /// True where `A <= a_min` in some channel and the inversion was guarded.
    pub mask: Vec<bool>,
}

/// Inverts `I = J A + B` as `J = clamp((I - B) / max(A, a_min), 0, 1)`.
pub fn restore(
    image: &ColorField,
    depth: &ScalarField,
    atten: &AttenuationParams,
    scat: &ScatterParams,
    scatter_cfg: &ScatterConfig,
    profile: &WaterProfile,
    a_min: f64,
) -> Result<Restored> {
    if image.dims() != depth.dims() {
        return Err(invalid(format!("restore: image {:?} vs depth {:?}", image.dims(), depth.dims())));
    }
    if !(a_min > 0.0) {
        return Err(invalid("restore: a_min must be positive"));
    }
    let edge = if atten.gamma == 0.0 { ScalarField::filled(depth.width, depth.height, 0.0) } else { edge_factor(image, depth)? };
    let a = attenuation_map_with_edge(depth, &edge, atten, profile.t_mod())?;
    let b = scattering_map(depth, scat, scatter_cfg)?.backscatter;
    let mut out = image.clone();
    let mut mask = vec![false; image.pixel_count()];
    for (i, px) in out.data.chunks_exact_mut(3).enumerate() {
        for c in 0..3 {
            let av = a.data[3 * i + c];
            if av <= a_min {
                mask[i] = true;
            }
            px[c] = ((px[c] - b.data[3 * i + c]) / av.max(a_min)).clamp(0.0, 1.0);
        }
    }
    Ok(Restored { image: out, mask })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryConfig {
    pub iterations: usize,
    /// Initial Adam rate, decayed by a cosine to `lr_end`.
    pub lr: f64,
    pub lr_end: f64,
    /// Starting guesses for `beta`, `b` and `B_inf`.
    pub beta: [f64; 3],
    pub b: f64,
    pub b_inf: [f64; 3],
    /// Pixels at or beyond this depth are excluded.
    pub d_far: f64,
    /// Damped Newton steps after the Adam phase.
    pub newton_steps: usize,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self { iterations: 3000, lr: 0.05, lr_end: 1e-4, beta: [0.30, 0.12, 0.07], b: 0.1, b_inf: [0.3, 0.3, 0.3], d_far: 20.0, newton_steps: 40 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecoveryResult {
    pub attenuation: AttenuationParams,
    pub scatter: ScatterParams,
    pub loss: f64,
}

/// One observation for physics recovery: clean radiance, depth and the
/// degraded image.
#[derive(Clone, Copy, Debug)]
pub struct Observation<'a> {
    pub clean: &'a ColorField,
    pub depth: &'a ScalarField,
    pub degraded: &'a ColorField,
}

/// Fits `beta`, `b` and `B_inf` to observations with every modulator neutral
/// (`gamma = lambda = delta = 0`, `t_mod = 1`, `w_c = 1`), using masked MSE
/// that skips saturated and uncovered pixels.
pub fn recover_physics(obs: &[Observation], cfg: &RecoveryConfig) -> Result<RecoveryResult> {
    if obs.is_empty() {
        return Err(invalid("recover_physics: no observations"));
    }
    for o in obs {
        if o.clean.dims() != o.depth.dims() || o.degraded.dims() != o.depth.dims() {
            return Err(invalid("recover_physics: observation dims differ"));
        }
    }
    let atten0 = AttenuationParams::from_beta(cfg.beta, [1.0; 3], 0.0);
    let scat0 = ScatterParams::init(0, cfg.b_inf, cfg.b, 0.0, 0.0);
    let mut all = atten0.to_params();
    scat0.write(&mut all);
    let trainable_names = [SLOT_THETA_BETA, SLOT_THETA_B, SLOT_B_INF];
    let mut train = ParamVector::new();
    let mut frozen = ParamVector::new();
    for s in all.slots() {
        let dst = if trainable_names.contains(&s.name.as_str()) { &mut train } else { &mut frozen };
        dst.insert(&s.name, s.shape(), all.get(&s.name).to_vec());
    }
    let masks: Vec<(Vec<f64>, f64)> = obs
        .iter()
        .map(|o| {
            let m: Vec<f64> = (0..o.depth.len())
                .map(|i| {
                    let px = &o.degraded.data[3 * i..3 * i + 3];
                    let ok = o.depth.data[i] < cfg.d_far && px.iter().all(|&v| v > 0.0 && v < 1.0);
                    if ok { 1.0 } else { 0.0 }
                })
                .collect();
            let n = m.iter().sum::<f64>();
            (m, n)
        })
        .collect();
    let total: f64 = masks.iter().map(|m| m.1).sum();
    if total == 0.0 {
        return Err(invalid("recover_physics: every pixel is masked"));
    }
    let neutral = ScatterConfig::neutral();
    let loss_fn = |t: &mut crate::diff::Tape, v: &ParamVars| {
        let vars = ParamVars::load(t, &frozen, false).union(v);
        let mut sum = t.scalar(0.0);
        for (o, (m, _)) in obs.iter().zip(&masks) {
            let d = scalar_const(t, o.depth);
            let j = color_const(t, o.clean);
            let target = color_const(t, o.degraded);
            let zero = t.constant(vec![0.0; o.depth.len()], Shape::plane(o.depth.height, o.depth.width));
            let one = t.scalar(1.0);
            let a = attenuation_map_var(t, d, zero, &vars, one);
            let s = scattering_map_var(t, d, &vars, &neutral);
            let direct = t.mul(j, a);
            let pred = t.add(direct, s.backscatter);
            let r = t.sub(pred, target);
            let r = t.square(r);
            let mask = t.constant(m.clone(), Shape::plane(o.depth.height, o.depth.width));
            let r = t.mul(r, mask);
            let r = t.sum(r);
            sum = t.add(sum, r);
        }
        Ok(t.scale(sum, 1.0 / (3.0 * total)))
    };
    let mut state = AdamState::new(&train);
    for k in 0..cfg.iterations {
        let (_, g) = backward(loss_fn, &train)?;
        let frac = k as f64 / cfg.iterations.max(1) as f64;
        let lr = cfg.lr_end + 0.5 * (cfg.lr - cfg.lr_end) * (1.0 + (std::f64::consts::PI * frac).cos());
        adam_step(&mut train, &g, &mut state, lr)?;
    }
    let loss = newton_refine(&loss_fn, &mut train, cfg.newton_steps)?;
    let mut out = frozen.clone();
    out.merge(&train);
    Ok(RecoveryResult { attenuation: AttenuationParams::read(&out)?, scatter: ScatterParams::read(&out)?, loss })
}

/// Levenberg-style damped Newton on a small parameter vector. The Hessian is
/// the central difference of the analytic gradient.
fn newton_refine<F>(loss_fn: &F, params: &mut ParamVector, steps: usize) -> Result<f64>
where
    F: Fn(&mut crate::diff::Tape, &ParamVars) -> Result<crate::diff::Var>,
{
    const H: f64 = 1e-5;
    let n = params.len();
    let (mut loss, mut grad) = backward(loss_fn, params)?;
    let mut damping = 1e-6;
    for _ in 0..steps {
        let mut hess = vec![0.0; n * n];
        for j in 0..n {
            let mut p = params.clone();
            p.data_mut()[j] += H;
            let (_, gp) = backward(loss_fn, &p)?;
            p.data_mut()[j] -= 2.0 * H;
            let (_, gm) = backward(loss_fn, &p)?;
            for i in 0..n {
                hess[i * n + j] = (gp.data()[i] - gm.data()[i]) / (2.0 * H);
            }
        }
        for i in 0..n {
            for j in 0..i {
                let m = 0.5 * (hess[i * n + j] + hess[j * n + i]);
                hess[i * n + j] = m;
                hess[j * n + i] = m;
            }
        }
        let mut improved = false;
        for _ in 0..12 {
            let mut a = hess.clone();
            for i in 0..n {
                a[i * n + i] += damping * hess[i * n + i].abs().max(1e-12);
            }
            let rhs: Vec<f64> = grad.data().iter().map(|g| -g).collect();
            let Some(delta) = solve(&mut a, rhs, n) else {
                damping *= 10.0;
                continue;
            };
            let mut trial = params.clone();
            trial.data_mut().iter_mut().zip(&delta).for_each(|(p, d)| *p += d);
            let (l, g) = backward(loss_fn, &trial)?;
            if l < loss {
                *params = trial;
                loss = l;
                grad = g;
                damping = (damping * 0.3).max(1e-9);
                improved = true;
                break;
            }
            damping *= 10.0;
        }
        if !improved {
            break;
        }
    }
    Ok(loss)
}

/// Gaussian elimination with partial pivoting; `None` when singular.
fn solve(a: &mut [f64], mut b: Vec<f64>, n: usize) -> Option<Vec<f64>> {
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))?;
        if a[piv * n + col].abs() < 1e-300 {
            return None;
        }
        if piv != col {
            for k in 0..n {
                a.swap(col * n + k, piv * n + k);
            }
            b.swap(col, piv);
        }
        for row in col + 1..n {
            let f = a[row * n + col] / a[col * n + col];
            for k in col..n {
                a[row * n + k] -= f * a[col * n + k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row * n + k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row * n + row];
    }
    Some(x)
}
