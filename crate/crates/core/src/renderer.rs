//! Minimal differentiable Gaussian splatting.
//!
//! Primitives are projected with the pinhole Jacobian, sorted once per view
//! by camera depth and alpha-composited front to back per pixel. The
//! rasterizer outputs black-background radiance, accumulated alpha and the
//! alpha-weighted expected depth. Pixel `(px, py)` samples the image plane at
//! integer coordinates.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diff::{sigmoid, BackwardFn, GradStore, ParamVars, ParamVector, Shape, Tape, Var};
use crate::field::{ColorField, ScalarField};

type M3 = [[f64; 3]; 3];

/// One anisotropic 3D Gaussian. Rotation is a `(w, x, y, z)` quaternion,
/// scale is stored as log-lengths and opacity as a logit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrimitive {
    pub mean: [f64; 3],
    pub rotation: [f64; 4],
    pub log_scale: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
}

impl GaussianPrimitive {
    pub fn isotropic(mean: [f64; 3], scale: f64, opacity: f64, color: [f64; 3]) -> Self {
        Self { mean, rotation: [1.0, 0.0, 0.0, 0.0], log_scale: [scale.ln(); 3], opacity: crate::diff::logit(opacity), color }
    }

    pub fn scale(&self) -> [f64; 3] {
        self.log_scale.map(f64::exp)
    }

    pub fn alpha(&self) -> f64 {
        sigmoid(self.opacity)
    }

    /// 3D covariance `R S^2 R^T`.
    pub fn covariance(&self) -> M3 {
        let (r, _) = quat_to_rot(self.rotation);
        let s = self.scale();
        let l = scale_columns(&r, &s);
        mat_mul_t(&l, &l)
    }
}

/// Pinhole camera with a world-to-camera rigid transform. Camera axes are
/// x right, y down, z forward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: M3,
    pub translation: [f64; 3],
    pub width: usize,
    pub height: usize,
}

impl Camera {
    /// Camera at `eye` looking at `target`; `down` is the world direction that
    /// should map to image +y.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(eye: [f64; 3], target: [f64; 3], down: [f64; 3], fx: f64, fy: f64, width: usize, height: usize) -> Self {
        let fwd = normalize(sub3(target, eye));
        let right = normalize(cross(down, fwd));
        let dn = cross(fwd, right);
        let rotation = [right, dn, fwd];
        let translation = neg3(mat_vec(&rotation, eye));
        Self {
            fx,
            fy,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            rotation,
            translation,
            width,
            height,
        }
    }

    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        add3(mat_vec(&self.rotation, p), self.translation)
    }

    pub fn validate(&self) -> crate::Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(crate::error::invalid("camera focal lengths must be positive"));
        }
        let rrt = mat_mul_t(&self.rotation, &self.rotation);
        for (i, row) in rrt.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                if (v - want).abs() > 1e-9 {
                    return Err(crate::error::invalid("camera rotation is not orthonormal"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub z_near: f64,
    pub eps_cov: f64,
    pub alpha_min: f64,
    pub d_far: f64,
    pub eps_depth: f64,
    pub w_cut: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { z_near: 0.01, eps_cov: 1e-6, alpha_min: 0.05, d_far: 20.0, eps_depth: 1e-8, w_cut: 1.0 / 255.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub color: ColorField,
    pub depth: ScalarField,
    pub alpha: ScalarField,
}

/// Screen-space footprint of one primitive.
#[derive(Clone, Debug)]
pub struct Projection {
    pub mean2d: [f64; 2],
    /// Upper triangle `(xx, xy, yy)` of the regularized 2D covariance.
    pub cov2d: [f64; 3],
    pub depth: f64,
}

/// Everything the backward pass needs about a projected primitive.
#[derive(Clone, Debug)]
struct Splat {
    index: usize,
    mean2d: [f64; 2],
    conic: [f64; 3],
    depth: f64,
    alpha_scale: f64,
    x0: i64,
    x1: i64,
    y0: i64,
    y1: i64,
    p_cam: [f64; 3],
    jac: [[f64; 3]; 2],
    m_cam: M3,
    rot: M3,
    rot_grad_basis: [M3; 4],
    qhat: [f64; 4],
    qnorm: f64,
    scale: [f64; 3],
}

/// Projects a primitive; `None` when it lies behind `z_near`.
pub fn project_gaussian(g: &GaussianPrimitive, cam: &Camera, cfg: &RenderConfig) -> Option<Projection> {
    let s = splat(0, g, cam, cfg)?;
    let det = s.conic[0] * s.conic[2] - s.conic[1] * s.conic[1];
    Some(Projection {
        mean2d: s.mean2d,
        cov2d: [s.conic[2] / det, -s.conic[1] / det, s.conic[0] / det],
        depth: s.depth,
    })
}

/// `exp(-1/2 d^T cov^-1 d)`; `None` if `cov2d` is not positive definite.
pub fn eval_gaussian_2d(mean2d: [f64; 2], cov2d: [f64; 3], x: [f64; 2]) -> Option<f64> {
    let conic = invert_sym2(cov2d)?;
    let (dx, dy) = (x[0] - mean2d[0], x[1] - mean2d[1]);
    Some((-0.5 * (conic[0] * dx * dx + 2.0 * conic[1] * dx * dy + conic[2] * dy * dy)).exp())
}

fn invert_sym2(c: [f64; 3]) -> Option<[f64; 3]> {
    let det = c[0] * c[2] - c[1] * c[1];
    if !(c[0] > 0.0 && det > 0.0 && det.is_finite()) {
        return None;
    }
    Some([c[2] / det, -c[1] / det, c[0] / det])
}

fn splat(index: usize, g: &GaussianPrimitive, cam: &Camera, cfg: &RenderConfig) -> Option<Splat> {
    let p = cam.to_camera(g.mean);
    if !(p[2] > cfg.z_near) {
        return None;
    }
    let qnorm = g.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(qnorm > 0.0) {
        log::warn!("primitive {index} has a zero quaternion; skipped");
        return None;
    }
    let qhat = g.rotation.map(|v| v / qnorm);
    let (rot, rot_grad_basis) = quat_to_rot(qhat);
    let scale = g.scale();
    let l = scale_columns(&rot, &scale);
    let sigma = mat_mul_t(&l, &l);
    let m_cam = mat_mul(&mat_mul(&cam.rotation, &sigma), &transpose(&cam.rotation));
    let (x, y, z) = (p[0], p[1], p[2]);
    let jac = [[cam.fx / z, 0.0, -cam.fx * x / (z * z)], [0.0, cam.fy / z, -cam.fy * y / (z * z)]];
    // cov2d = J M J^T + eps I
    let jm = [
        [0, 1, 2].map(|k| (0..3).map(|i| jac[0][i] * m_cam[i][k]).sum::<f64>()),
        [0, 1, 2].map(|k| (0..3).map(|i| jac[1][i] * m_cam[i][k]).sum::<f64>()),
    ];
    let cxx = (0..3).map(|k| jm[0][k] * jac[0][k]).sum::<f64>() + cfg.eps_cov;
    let cxy = (0..3).map(|k| jm[0][k] * jac[1][k]).sum::<f64>();
    let cyy = (0..3).map(|k| jm[1][k] * jac[1][k]).sum::<f64>() + cfg.eps_cov;
    let Some(conic) = invert_sym2([cxx, cxy, cyy]) else {
        log::warn!("primitive {index} has a non-SPD screen covariance; skipped");
        return None;
    };
    let mean2d = [cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy];
    // Support radius containing every pixel with weight >= w_cut.
    let tr = 0.5 * (cxx + cyy);
    let lmax = tr + (tr * tr - (cxx * cyy - cxy * cxy)).max(0.0).sqrt();
    let r = (2.0 * (1.0 / cfg.w_cut).ln() * lmax).sqrt();
    Some(Splat {
        index,
        mean2d,
        conic,
        depth: z,
        alpha_scale: g.alpha(),
        x0: (mean2d[0] - r).floor() as i64,
        x1: (mean2d[0] + r).ceil() as i64,
        y0: (mean2d[1] - r).floor() as i64,
        y1: (mean2d[1] + r).ceil() as i64,
        p_cam: p,
        jac,
        m_cam,
        rot,
        rot_grad_basis,
        qhat,
        qnorm,
        scale,
    })
}

/// Projects, culls and depth-sorts (ties by input index).
fn prepare(cloud: &[GaussianPrimitive], cam: &Camera, cfg: &RenderConfig) -> (Vec<Splat>, Vec<Vec<u32>>) {
    let mut splats: Vec<Splat> = cloud.iter().enumerate().filter_map(|(i, g)| splat(i, g, cam, cfg)).collect();
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    let mut rows = vec![Vec::new(); cam.height];
    for (k, s) in splats.iter().enumerate() {
        if s.x1 < 0 || s.x0 >= cam.width as i64 {
            continue;
        }
        let y0 = s.y0.max(0);
        let y1 = s.y1.min(cam.height as i64 - 1);
        for y in y0..=y1 {
            rows[y as usize].push(k as u32);
        }
    }
    (splats, rows)
}

struct Contribution {
    k: usize,
    weight: f64,
    alpha: f64,
    trans: f64,
    dx: f64,
    dy: f64,
}

#[inline]
fn pixel_contributions(splats: &[Splat], row: &[u32], px: usize, py: usize, w_cut: f64, out: &mut Vec<Contribution>) {
    out.clear();
    let (xf, yf) = (px as f64, py as f64);
    let mut trans = 1.0;
    for &k in row {
        let s = &splats[k as usize];
        if (px as i64) < s.x0 || (px as i64) > s.x1 {
            continue;
        }
        let (dx, dy) = (xf - s.mean2d[0], yf - s.mean2d[1]);
        let q = s.conic[0] * dx * dx + 2.0 * s.conic[1] * dx * dy + s.conic[2] * dy * dy;
        let weight = (-0.5 * q).exp();
        if weight < w_cut {
            continue;
        }
        let alpha = s.alpha_scale * weight;
        out.push(Contribution { k: k as usize, weight, alpha, trans, dx, dy });
        trans *= 1.0 - alpha;
    }
}

/// Planar `[5,h,w]` buffer: color (3), depth, alpha.
fn forward(cloud: &[GaussianPrimitive], splats: &[Splat], rows: &[Vec<u32>], cam: &Camera, cfg: &RenderConfig) -> Vec<f64> {
    let (w, h) = (cam.width, cam.height);
    let n = w * h;
    let row_vals: Vec<Vec<[f64; 5]>> = (0..h)
        .into_par_iter()
        .map(|py| {
            let mut contrib = Vec::new();
            (0..w)
                .map(|px| {
                    pixel_contributions(splats, &rows[py], px, py, cfg.w_cut, &mut contrib);
                    let (mut c, mut a, mut dn) = ([0.0; 3], 0.0, 0.0);
                    for ct in &contrib {
                        let s = &splats[ct.k];
                        let wgt = ct.alpha * ct.trans;
                        let col = cloud[s.index].color;
                        for i in 0..3 {
                            c[i] += col[i] * wgt;
                        }
                        a += wgt;
                        dn += s.depth * wgt;
                    }
                    let depth = if a >= cfg.alpha_min { dn / a.max(cfg.eps_depth) } else { cfg.d_far };
                    [c[0], c[1], c[2], depth, a]
                })
                .collect()
        })
        .collect();
    let mut out = vec![0.0; 5 * n];
    for (py, row) in row_vals.iter().enumerate() {
        for (px, v) in row.iter().enumerate() {
            for (ch, val) in v.iter().enumerate() {
                out[ch * n + py * w + px] = *val;
            }
        }
    }
    out
}

/// Per-primitive gradient of the loss w.r.t. raw attributes.
#[derive(Clone, Debug, Default)]
pub struct CloudGrad {
    pub mean: Vec<[f64; 3]>,
    pub rotation: Vec<[f64; 4]>,
    pub log_scale: Vec<[f64; 3]>,
    pub opacity: Vec<f64>,
    pub color: Vec<[f64; 3]>,
}

#[derive(Clone, Copy, Default)]
struct ScreenGrad {
    mean2d: [f64; 2],
    conic: [f64; 3],
    depth: f64,
    opacity: f64,
    color: [f64; 3],
}

impl ScreenGrad {
    fn add(&mut self, o: &ScreenGrad) {
        for i in 0..2 {
            self.mean2d[i] += o.mean2d[i];
        }
        for i in 0..3 {
            self.conic[i] += o.conic[i];
            self.color[i] += o.color[i];
        }
        self.depth += o.depth;
        self.opacity += o.opacity;
    }
}

const ROW_BLOCK: usize = 8;

fn backward(
    cloud: &[GaussianPrimitive],
    splats: &[Splat],
    rows: &[Vec<u32>],
    cam: &Camera,
    cfg: &RenderConfig,
    out: &[f64],
    g: &[f64],
) -> CloudGrad {
    let (w, h) = (cam.width, cam.height);
    let n = w * h;
    let nblocks = h.div_ceil(ROW_BLOCK);
    // Fixed row blocks reduced in block order: independent of thread count.
    let partials: Vec<Vec<ScreenGrad>> = (0..nblocks)
        .into_par_iter()
        .map(|b| {
            let mut acc = vec![ScreenGrad::default(); splats.len()];
            let mut contrib = Vec::new();
            for py in b * ROW_BLOCK..((b + 1) * ROW_BLOCK).min(h) {
                for px in 0..w {
                    let i = py * w + px;
                    let gc = [g[i], g[n + i], g[2 * n + i]];
                    let (gdepth, galpha) = (g[3 * n + i], g[4 * n + i]);
                    if gc == [0.0; 3] && gdepth == 0.0 && galpha == 0.0 {
                        continue;
                    }
                    pixel_contributions(splats, &rows[py], px, py, cfg.w_cut, &mut contrib);
                    if contrib.is_empty() {
                        continue;
                    }
                    let a = out[4 * n + i];
                    let (g_dn, g_a) = if a >= cfg.alpha_min {
                        let den = a.max(cfg.eps_depth);
                        let depth = out[3 * n + i];
                        let g_a_from_depth = if a > cfg.eps_depth { -gdepth * depth / den } else { 0.0 };
                        (gdepth / den, galpha + g_a_from_depth)
                    } else {
                        (0.0, galpha)
                    };
                    let mut suffix = 0.0;
                    for ct in contrib.iter().rev() {
                        let s = &splats[ct.k];
                        let col = cloud[s.index].color;
                        let sv = gc[0] * col[0] + gc[1] * col[1] + gc[2] * col[2] + g_dn * s.depth + g_a;
                        let wgt = ct.alpha * ct.trans;
                        let d_alpha = ct.trans * sv - suffix / (1.0 - ct.alpha);
                        suffix += sv * wgt;
                        let sg = &mut acc[ct.k];
                        for c in 0..3 {
                            sg.color[c] += gc[c] * wgt;
                        }
                        sg.depth += g_dn * wgt;
                        sg.opacity += d_alpha * ct.weight * s.alpha_scale * (1.0 - s.alpha_scale);
                        let d_weight = d_alpha * s.alpha_scale;
                        let d_q = d_weight * (-0.5 * ct.weight);
                        let (dx, dy) = (ct.dx, ct.dy);
                        let qd = [s.conic[0] * dx + s.conic[1] * dy, s.conic[1] * dx + s.conic[2] * dy];
                        sg.mean2d[0] += -2.0 * d_q * qd[0];
                        sg.mean2d[1] += -2.0 * d_q * qd[1];
                        sg.conic[0] += d_q * dx * dx;
                        sg.conic[1] += d_q * dx * dy;
                        sg.conic[2] += d_q * dy * dy;
                    }
                }
            }
            acc
        })
        .collect();
    let mut screen = vec![ScreenGrad::default(); splats.len()];
    for part in &partials {
        for (s, p) in screen.iter_mut().zip(part) {
            s.add(p);
        }
    }

    let m = cloud.len();
    let mut grad = CloudGrad {
        mean: vec![[0.0; 3]; m],
        rotation: vec![[0.0; 4]; m],
        log_scale: vec![[0.0; 3]; m],
        opacity: vec![0.0; m],
        color: vec![[0.0; 3]; m],
    };
    for (s, sg) in splats.iter().zip(&screen) {
        let gi = s.index;
        grad.color[gi] = sg.color;
        grad.opacity[gi] = sg.opacity;
        // conic -> 2D covariance: dL/dSigma2 = -Q G Q
        let q = [[s.conic[0], s.conic[1]], [s.conic[1], s.conic[2]]];
        let gq = [[sg.conic[0], sg.conic[1]], [sg.conic[1], sg.conic[2]]];
        let qg = mul2(&q, &gq);
        let g_cov = mul2(&qg, &q).map(|r| r.map(|v| -v));
        // cov2d = J M J^T
        let jac = &s.jac;
        let mut g_m = [[0.0; 3]; 3];
        for (i, row) in g_m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..2).flat_map(|a| (0..2).map(move |b| (a, b))).map(|(a, b)| jac[a][i] * g_cov[a][b] * jac[b][j]).sum();
            }
        }
        let mut g_j = [[0.0; 3]; 2];
        for a in 0..2 {
            for k in 0..3 {
                g_j[a][k] = 2.0 * (0..2).map(|b| g_cov[a][b] * (0..3).map(|i| jac[b][i] * s.m_cam[i][k]).sum::<f64>()).sum::<f64>();
            }
        }
        // camera-space point
        let (px, py, pz) = (s.p_cam[0], s.p_cam[1], s.p_cam[2]);
        let (fx, fy) = (cam.fx, cam.fy);
        let mut gp = [0.0; 3];
        gp[0] += sg.mean2d[0] * fx / pz;
        gp[1] += sg.mean2d[1] * fy / pz;
        gp[2] += -sg.mean2d[0] * fx * px / (pz * pz) - sg.mean2d[1] * fy * py / (pz * pz);
        gp[2] += sg.depth;
        gp[0] += g_j[0][2] * (-fx / (pz * pz));
        gp[1] += g_j[1][2] * (-fy / (pz * pz));
        gp[2] += g_j[0][0] * (-fx / (pz * pz))
            + g_j[0][2] * (2.0 * fx * px / (pz * pz * pz))
            + g_j[1][1] * (-fy / (pz * pz))
            + g_j[1][2] * (2.0 * fy * py / (pz * pz * pz));
        grad.mean[gi] = mat_t_vec(&cam.rotation, gp);
        // M = V Sigma V^T
        let g_sigma = mat_mul(&mat_mul(&transpose(&cam.rotation), &g_m), &cam.rotation);
        // Sigma = L L^T, L = R S
        let l = scale_columns(&s.rot, &s.scale);
        let g_l = mat_mul(&g_sigma, &l).map(|r| r.map(|v| 2.0 * v));
        let mut g_rot = [[0.0; 3]; 3];
        let mut g_s = [0.0; 3];
        for i in 0..3 {
            for j in 0..3 {
                g_rot[i][j] = g_l[i][j] * s.scale[j];
                g_s[j] += g_l[i][j] * s.rot[i][j];
            }
        }
        grad.log_scale[gi] = [0, 1, 2].map(|j| g_s[j] * s.scale[j]);
        let g_qhat: [f64; 4] = [0, 1, 2, 3].map(|k| frob(&g_rot, &s.rot_grad_basis[k]));
        let proj = (0..4).map(|k| g_qhat[k] * s.qhat[k]).sum::<f64>();
        grad.rotation[gi] = [0, 1, 2, 3].map(|k| (g_qhat[k] - s.qhat[k] * proj) / s.qnorm);
    }
    grad
}

/// Renders a cloud (plain values).
pub fn rasterize(cloud: &[GaussianPrimitive], cam: &Camera, cfg: &RenderConfig) -> RenderOutput {
    let (splats, rows) = prepare(cloud, cam, cfg);
    let buf = forward(cloud, &splats, &rows, cam, cfg);
    split_output(&buf, cam.width, cam.height)
}

fn split_output(buf: &[f64], w: usize, h: usize) -> RenderOutput {
    let n = w * h;
    RenderOutput {
        color: ColorField::from_planar(w, h, &buf[..3 * n]),
        depth: ScalarField { width: w, height: h, data: buf[3 * n..4 * n].to_vec() },
        alpha: ScalarField { width: w, height: h, data: buf[4 * n..].to_vec() },
    }
}

pub const SLOT_MEAN: &str = "gaussians/mean";
pub const SLOT_ROTATION: &str = "gaussians/rotation";
pub const SLOT_LOG_SCALE: &str = "gaussians/log_scale";
pub const SLOT_OPACITY: &str = "gaussians/opacity";
pub const SLOT_COLOR: &str = "gaussians/color";

/// Writes the cloud into `gaussians/*` slots.
pub fn cloud_to_params(cloud: &[GaussianPrimitive], params: &mut ParamVector) {
    let n = cloud.len();
    params.insert(SLOT_MEAN, Shape::new(n, 3, 1), cloud.iter().flat_map(|g| g.mean).collect());
    params.insert(SLOT_ROTATION, Shape::new(n, 4, 1), cloud.iter().flat_map(|g| g.rotation).collect());
    params.insert(SLOT_LOG_SCALE, Shape::new(n, 3, 1), cloud.iter().flat_map(|g| g.log_scale).collect());
    params.insert(SLOT_OPACITY, Shape::new(n, 1, 1), cloud.iter().map(|g| g.opacity).collect());
    params.insert(SLOT_COLOR, Shape::new(n, 3, 1), cloud.iter().flat_map(|g| g.color).collect());
}

fn cloud_from_slices(mean: &[f64], rot: &[f64], ls: &[f64], op: &[f64], col: &[f64]) -> Vec<GaussianPrimitive> {
    (0..op.len())
        .map(|i| GaussianPrimitive {
            mean: [mean[3 * i], mean[3 * i + 1], mean[3 * i + 2]],
            rotation: [rot[4 * i], rot[4 * i + 1], rot[4 * i + 2], rot[4 * i + 3]],
            log_scale: [ls[3 * i], ls[3 * i + 1], ls[3 * i + 2]],
            opacity: op[i],
            color: [col[3 * i], col[3 * i + 1], col[3 * i + 2]],
        })
        .collect()
}

pub fn cloud_from_params(params: &ParamVector) -> crate::Result<Vec<GaussianPrimitive>> {
    Ok(cloud_from_slices(
        params.try_get(SLOT_MEAN)?,
        params.try_get(SLOT_ROTATION)?,
        params.try_get(SLOT_LOG_SCALE)?,
        params.try_get(SLOT_OPACITY)?,
        params.try_get(SLOT_COLOR)?,
    ))
}

/// Tape handles of a rendered view.
#[derive(Clone, Copy, Debug)]
pub struct RenderVars {
    /// `[3,h,w]` black-background radiance.
    pub color: Var,
    /// `[1,h,w]`
    pub depth: Var,
    /// `[1,h,w]`
    pub alpha: Var,
}

/// Differentiable rasterization of the `gaussians/*` slots.
pub fn rasterize_var(tape: &mut Tape, vars: &ParamVars, cam: &Camera, cfg: &RenderConfig) -> RenderVars {
    let ids = [SLOT_MEAN, SLOT_ROTATION, SLOT_LOG_SCALE, SLOT_OPACITY, SLOT_COLOR].map(|s| vars.get(s));
    let cloud = cloud_from_slices(tape.value(ids[0]), tape.value(ids[1]), tape.value(ids[2]), tape.value(ids[3]), tape.value(ids[4]));
    let (splats, rows) = prepare(&cloud, cam, cfg);
    let buf = forward(&cloud, &splats, &rows, cam, cfg);
    let requires = ids.iter().any(|&v| tape.requires_grad(v));
    let back: Option<BackwardFn> = requires.then(|| {
        let cam = cam.clone();
        let cfg = *cfg;
        let out = buf.clone();
        Box::new(move |g: &[f64], st: &mut GradStore| {
            let cg = backward(&cloud, &splats, &rows, &cam, &cfg, &out, g);
            if let Some(gm) = st.slot(ids[0]) {
                for (d, v) in gm.iter_mut().zip(cg.mean.iter().flatten()) {
                    *d += v;
                }
            }
            if let Some(gr) = st.slot(ids[1]) {
                for (d, v) in gr.iter_mut().zip(cg.rotation.iter().flatten()) {
                    *d += v;
                }
            }
            if let Some(gs) = st.slot(ids[2]) {
                for (d, v) in gs.iter_mut().zip(cg.log_scale.iter().flatten()) {
                    *d += v;
                }
            }
            if let Some(go) = st.slot(ids[3]) {
                for (d, v) in go.iter_mut().zip(&cg.opacity) {
                    *d += v;
                }
            }
            if let Some(gc) = st.slot(ids[4]) {
                for (d, v) in gc.iter_mut().zip(cg.color.iter().flatten()) {
                    *d += v;
                }
            }
        }) as BackwardFn
    });
    let all = tape.push(buf, Shape::new(5, cam.height, cam.width), requires, back);
    RenderVars {
        color: tape.slice_channels(all, 0, 3),
        depth: tape.slice_channels(all, 3, 1),
        alpha: tape.slice_channels(all, 4, 1),
    }
}

// ----- small dense linear algebra ------------------------------------------

/// Rotation matrix of a unit quaternion and its partials w.r.t. `(w,x,y,z)`.
fn quat_to_rot(q: [f64; 4]) -> (M3, [M3; 4]) {
    let [w, x, y, z] = q;
    let r = [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ];
    let dw = [[0.0, -2.0 * z, 2.0 * y], [2.0 * z, 0.0, -2.0 * x], [-2.0 * y, 2.0 * x, 0.0]];
    let dx = [[0.0, 2.0 * y, 2.0 * z], [2.0 * y, -4.0 * x, -2.0 * w], [2.0 * z, 2.0 * w, -4.0 * x]];
    let dy = [[-4.0 * y, 2.0 * x, 2.0 * w], [2.0 * x, 0.0, 2.0 * z], [-2.0 * w, 2.0 * z, -4.0 * y]];
    let dz = [[-4.0 * z, -2.0 * w, 2.0 * x], [2.0 * w, -4.0 * z, 2.0 * y], [2.0 * x, 2.0 * y, 0.0]];
    (r, [dw, dx, dy, dz])
}

fn scale_columns(m: &M3, s: &[f64; 3]) -> M3 {
    let mut out = *m;
    for row in out.iter_mut() {
        for j in 0..3 {
            row[j] *= s[j];
        }
    }
    out
}

fn mat_mul(a: &M3, b: &M3) -> M3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// `a b^T`
fn mat_mul_t(a: &M3, b: &M3) -> M3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[j][k]).sum();
        }
    }
    out
}

fn transpose(a: &M3) -> M3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

fn mat_vec(a: &M3, v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| a[i][0] * v[0] + a[i][1] * v[1] + a[i][2] * v[2])
}

fn mat_t_vec(a: &M3, v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| a[0][i] * v[0] + a[1][i] * v[1] + a[2][i] * v[2])
}

fn frob(a: &M3, b: &M3) -> f64 {
    (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).map(|(i, j)| a[i][j] * b[i][j]).sum()
}

fn mul2(a: &[[f64; 2]; 2], b: &[[f64; 2]; 2]) -> [[f64; 2]; 2] {
    [
        [a[0][0] * b[0][0] + a[0][1] * b[1][0], a[0][0] * b[0][1] + a[0][1] * b[1][1]],
        [a[1][0] * b[0][0] + a[1][1] * b[1][0], a[1][0] * b[0][1] + a[1][1] * b[1][1]],
    ]
}

pub(crate) fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn add3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn neg3(a: [f64; 3]) -> [f64; 3] {
    a.map(|v| -v)
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub(crate) fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    a.map(|v| v / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{grad_check, ParamVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn front_camera(w: usize, h: usize, f: f64) -> Camera {
        Camera::look_at([0.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0], f, f, w, h)
    }

    #[test]
    fn look_at_identity_frame() {
        let cam = front_camera(8, 8, 10.0);
        assert_eq!(cam.rotation, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        cam.validate().unwrap();
    }

    #[test]
    fn on_axis_isotropic_projection() {
        let cfg = RenderConfig::default();
        let cam = front_camera(32, 32, 50.0);
        let (z, s) = (4.0, 0.2);
        let g = GaussianPrimitive::isotropic([0.0, 0.0, z], s, 0.5, [1.0; 3]);
        let p = project_gaussian(&g, &cam, &cfg).unwrap();
        let expect = (50.0 * s / z).powi(2);
        assert!((p.cov2d[0] - expect - cfg.eps_cov).abs() < 1e-12);
        assert!((p.cov2d[2] - expect - cfg.eps_cov).abs() < 1e-12);
        assert!(p.cov2d[1].abs() < 1e-15);
        assert_eq!(p.depth, z);

        let far = GaussianPrimitive::isotropic([0.0, 0.0, 2.0 * z], s, 0.5, [1.0; 3]);
        let pf = project_gaussian(&far, &cam, &cfg).unwrap();
        let ratio = ((p.cov2d[0] - cfg.eps_cov) / (pf.cov2d[0] - cfg.eps_cov)).sqrt();
        assert!((ratio - 2.0).abs() < 1e-12);

        let mut rotated = g;
        rotated.rotation = [0.9, 0.1, -0.3, 0.2];
        let pr = project_gaussian(&rotated, &cam, &cfg).unwrap();
        for i in 0..3 {
            assert!((pr.cov2d[i] - p.cov2d[i]).abs() < 1e-12);
        }

        let behind = GaussianPrimitive::isotropic([0.0, 0.0, -1.0], s, 0.5, [1.0; 3]);
        assert!(project_gaussian(&behind, &cam, &cfg).is_none());
    }

    #[test]
    fn gaussian_weight_values() {
        let m = [3.0, 4.0];
        assert_eq!(eval_gaussian_2d(m, [2.0, 0.3, 1.5], m).unwrap(), 1.0);
        let s2 = 2.5;
        let w = eval_gaussian_2d(m, [s2, 0.0, s2], [m[0] + s2.sqrt(), m[1]]).unwrap();
        assert!((w - (-0.5f64).exp()).abs() < 1e-15);
        let mut last = 1.0;
        for k in 1..20 {
            let t = k as f64 * 0.3;
            let w = eval_gaussian_2d(m, [2.0, 0.3, 1.5], [m[0] + 0.6 * t, m[1] - 0.8 * t]).unwrap();
            assert!(w < last);
            last = w;
        }
        assert!(eval_gaussian_2d(m, [1.0, 2.0, 1.0], m).is_none());
    }

    #[test]
    fn empty_cloud_renders_background() {
        let cfg = RenderConfig::default();
        let cam = front_camera(6, 5, 10.0);
        let out = rasterize(&[], &cam, &cfg);
        assert!(out.color.data.iter().all(|&v| v == 0.0));
        assert!(out.alpha.data.iter().all(|&v| v == 0.0));
        assert!(out.depth.data.iter().all(|&v| v == cfg.d_far));
    }

    #[test]
    fn single_gaussian_center_pixel() {
        let cfg = RenderConfig::default();
        let cam = front_camera(9, 9, 20.0);
        let g = GaussianPrimitive::isotropic([0.0, 0.0, 3.0], 0.1, 0.5, [1.0, 0.0, 0.0]);
        let out = rasterize(&[g], &cam, &cfg);
        let c = out.color.get(4, 4);
        assert!((c[0] - 0.5).abs() < 1e-15 && c[1] == 0.0 && c[2] == 0.0);
        assert!((out.alpha.get(4, 4) - 0.5).abs() < 1e-15);
        assert!((out.depth.get(4, 4) - 3.0).abs() < 1e-12);
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<GaussianPrimitive> {
        (0..n)
            .map(|_| GaussianPrimitive {
                mean: [rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4), rng.gen_range(2.0..4.0)],
                rotation: [rng.gen_range(0.5..1.0), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)],
                log_scale: [rng.gen_range(-2.3..-1.2), rng.gen_range(-2.3..-1.2), rng.gen_range(-2.3..-1.2)],
                opacity: rng.gen_range(-1.0..2.0),
                color: [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)],
            })
            .collect()
    }

    /// Direct per-pixel loop over every primitive, no bounding boxes.
    fn brute_force(cloud: &[GaussianPrimitive], cam: &Camera, cfg: &RenderConfig) -> RenderOutput {
        let mut items: Vec<(f64, usize, Projection)> = cloud
            .iter()
            .enumerate()
            .filter_map(|(i, g)| project_gaussian(g, cam, cfg).map(|p| (p.depth, i, p)))
            .collect();
        items.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut color = ColorField::filled(cam.width, cam.height, [0.0; 3]);
        let mut depth = ScalarField::filled(cam.width, cam.height, 0.0);
        let mut alpha = ScalarField::filled(cam.width, cam.height, 0.0);
        for y in 0..cam.height {
            for x in 0..cam.width {
                let (mut c, mut a, mut d, mut t) = ([0.0; 3], 0.0, 0.0, 1.0);
                for (z, i, p) in &items {
                    let w = eval_gaussian_2d(p.mean2d, p.cov2d, [x as f64, y as f64]).unwrap();
                    if w < cfg.w_cut {
                        continue;
                    }
                    let al = cloud[*i].alpha() * w;
                    for k in 0..3 {
                        c[k] += cloud[*i].color[k] * al * t;
                    }
                    a += al * t;
                    d += z * al * t;
                    t *= 1.0 - al;
                }
                color.set(x, y, c);
                alpha.set(x, y, a);
                depth.set(x, y, if a >= cfg.alpha_min { d / a } else { cfg.d_far });
            }
        }
        RenderOutput { color, depth, alpha }
    }

    #[test]
    fn matches_brute_force_and_is_order_invariant() {
        let cfg = RenderConfig::default();
        let cam = front_camera(16, 12, 14.0);
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cloud = random_cloud(&mut rng, 5);
            let out = rasterize(&cloud, &cam, &cfg);
            let bf = brute_force(&cloud, &cam, &cfg);
            for (a, b) in out.color.data.iter().zip(&bf.color.data).chain(out.alpha.data.iter().zip(&bf.alpha.data)) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in out.depth.data.iter().zip(&bf.depth.data) {
                assert!((a - b).abs() < 1e-12);
            }
            assert!(out.alpha.data.iter().all(|&a| (0.0..=1.0).contains(&a)));
            let mut rev = cloud.clone();
            rev.reverse();
            assert_eq!(rasterize(&rev, &cam, &cfg), out);
        }
    }

    fn render_loss(cam: &Camera, cfg: &RenderConfig) -> impl Fn(&mut Tape, &ParamVars) -> crate::Result<Var> {
        let cam = cam.clone();
        let cfg = *cfg;
        move |t: &mut Tape, v: &ParamVars| {
            let r = rasterize_var(t, v, &cam, &cfg);
            let n = cam.width * cam.height;
            let wc = t.constant((0..3 * n).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.3).collect(), Shape::new(3, cam.height, cam.width));
            let wd = t.constant((0..n).map(|i| ((i * 104729) % 7) as f64 / 7.0).collect(), Shape::plane(cam.height, cam.width));
            let a = t.mul(r.color, wc);
            let a = t.sum(a);
            let d = t.mul(r.depth, wd);
            let d = t.sum(d);
            let d = t.scale(d, 0.05);
            let al = t.square(r.alpha);
            let al = t.sum(al);
            let s = t.add(a, d);
            Ok(t.add(s, al))
        }
    }

    #[test]
    fn gradients_match_central_differences() {
        let cfg = RenderConfig::default();
        let cam = front_camera(8, 8, 9.0);
        for seed in [3u64, 11, 29] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cloud = random_cloud(&mut rng, 2);
            let mut p = ParamVector::new();
            cloud_to_params(&cloud, &mut p);
            let r = grad_check("rasterize", render_loss(&cam, &cfg), &p, 1e-4).unwrap();
            assert!(r.max_rel_err < 1e-4, "seed {seed}: {r:?}");
        }
    }
}
