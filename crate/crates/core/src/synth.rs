//! Synthetic underwater scenes with known medium parameters.
//!
//! A textured relief of Gaussians is rendered from cameras on a short arc,
//! and each clean view is degraded with the closed-form image formation model
//! `I = J exp(-beta D) + B_inf (1 - exp(-b D))`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::{fit_classifier, ClassifierWeights, FitConfig, WaterClass};
use crate::error::{invalid, Error, Result};
use crate::field::{ColorField, ScalarField};
use crate::renderer::{rasterize, Camera, GaussianPrimitive, RenderConfig};

/// Half-angle of the camera arc in degrees.
pub const ARC_HALF_DEG: f64 = 10.0;
/// Views whose mean accumulated alpha falls below this are rejected.
const MIN_COVERAGE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub n_gaussians: usize,
    pub width: usize,
    pub height: usize,
    pub n_views: usize,
    pub class: WaterClass,
    pub beta: [f64; 3],
    pub b: f64,
    pub b_inf: [f64; 3],
    pub d_min: f64,
    pub d_max: f64,
}

fn range(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..hi)
}

/// Class-conditioned medium parameters `(beta, b, B_inf)`.
pub fn sample_medium(class: WaterClass, rng: &mut ChaCha8Rng) -> ([f64; 3], f64, [f64; 3]) {
    match class {
        WaterClass::Clear => (
            [range(rng, 0.25, 0.40), range(rng, 0.09, 0.14), range(rng, 0.03, 0.06)],
            range(rng, 0.02, 0.06),
            [range(rng, 0.03, 0.08), range(rng, 0.18, 0.26), range(rng, 0.45, 0.60)],
        ),
        WaterClass::Medium => (
            [range(rng, 0.30, 0.45), range(rng, 0.10, 0.14), range(rng, 0.08, 0.11)],
            range(rng, 0.07, 0.13),
            [range(rng, 0.05, 0.10), range(rng, 0.33, 0.40), range(rng, 0.38, 0.46)],
        ),
        WaterClass::Turbid => (
            [range(rng, 0.40, 0.60), range(rng, 0.15, 0.25), range(rng, 0.30, 0.40)],
            range(rng, 0.15, 0.35),
            [range(rng, 0.10, 0.16), range(rng, 0.40, 0.50), range(rng, 0.18, 0.28)],
        ),
    }
}

impl SceneSpec {
    /// Spec with medium parameters drawn from the class ranges.
    pub fn sample(class: WaterClass, seed: u64, n_gaussians: usize, width: usize, height: usize, n_views: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_a7e5);
        let (beta, b, b_inf) = sample_medium(class, &mut rng);
        Self { seed, n_gaussians, width, height, n_views, class, beta, b, b_inf, d_min: 2.5, d_max: 7.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_gaussians == 0 {
            return Err(invalid("n_gaussians must be at least 1"));
        }
        if self.width < 8 || self.height < 8 {
            return Err(invalid(format!("image must be at least 8x8, got {}x{}", self.width, self.height)));
        }
        if self.n_views == 0 {
            return Err(invalid("n_views must be at least 1"));
        }
        if !(self.d_min > 0.0 && self.d_max > self.d_min && self.d_max.is_finite()) {
            return Err(invalid(format!("depth range must satisfy 0 < d_min < d_max, got [{}, {}]", self.d_min, self.d_max)));
        }
        if self.beta.iter().chain([&self.b]).any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(invalid("beta and b must be finite and non-negative"));
        }
        if self.b_inf.iter().any(|v| !(0.0..1.0).contains(v)) {
            return Err(invalid("B_inf must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Everything the pipeline needs about one synthetic scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneBundle {
    pub spec: SceneSpec,
    pub cloud: Vec<GaussianPrimitive>,
    pub cameras: Vec<Camera>,
    pub clean: Vec<ColorField>,
    pub depth: Vec<ScalarField>,
    pub degraded: Vec<ColorField>,
}

/// Per-channel `J exp(-beta D) + B_inf (1 - exp(-b D))`, clamped to [0, 1].
pub fn degrade(j: &ColorField, depth: &ScalarField, beta: [f64; 3], b: f64, b_inf: [f64; 3]) -> Result<ColorField> {
    if j.dims() != depth.dims() {
        return Err(invalid(format!("degrade: image {:?} vs depth {:?}", j.dims(), depth.dims())));
    }
    if depth.data.iter().any(|&d| d < 0.0) {
        return Err(invalid("degrade: depth must be non-negative"));
    }
    let mut out = j.clone();
    for (i, px) in out.data.chunks_exact_mut(3).enumerate() {
        let d = depth.data[i];
        let back = 1.0 - (-b * d).exp();
        for c in 0..3 {
            px[c] = (px[c] * (-beta[c] * d).exp() + b_inf[c] * back).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Smooth value noise on a `cells x cells` lattice, sampled at `(u, v)` in [0, 1]^2.
struct ValueNoise {
    cells: usize,
    lattice: Vec<f64>,
}

impl ValueNoise {
    fn new(cells: usize, rng: &mut ChaCha8Rng) -> Self {
        let n = cells + 1;
        Self { cells, lattice: (0..n * n).map(|_| rng.gen_range(0.0..1.0)).collect() }
    }

    fn sample(&self, u: f64, v: f64) -> f64 {
        let n = self.cells + 1;
        let fx = (u.clamp(0.0, 1.0) * self.cells as f64).min(self.cells as f64 - 1e-9);
        let fy = (v.clamp(0.0, 1.0) * self.cells as f64).min(self.cells as f64 - 1e-9);
        let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let (tx, ty) = (smooth(fx - x0 as f64), smooth(fy - y0 as f64));
        let at = |x: usize, y: usize| self.lattice[y * n + x];
        let top = at(x0, y0) * (1.0 - tx) + at(x0 + 1, y0) * tx;
        let bottom = at(x0, y0 + 1) * (1.0 - tx) + at(x0 + 1, y0 + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

/// Procedural albedo: coarse hue variation plus fine detail, in [0.1, 0.9].
struct Texture {
    coarse: [ValueNoise; 3],
    fine: ValueNoise,
}

impl Texture {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        Self {
            coarse: [ValueNoise::new(3, rng), ValueNoise::new(3, rng), ValueNoise::new(3, rng)],
            fine: ValueNoise::new(9, rng),
        }
    }

    fn color(&self, u: f64, v: f64) -> [f64; 3] {
        let detail = self.fine.sample(u, v);
        [0, 1, 2].map(|c| (0.1 + 0.55 * self.coarse[c].sample(u, v) + 0.25 * detail).clamp(0.1, 0.9))
    }
}

fn relief_height(bumps: &[([f64; 2], f64, f64)], u: f64, v: f64) -> f64 {
    let mut h = 0.35 * u + 0.15 * v;
    for &(c, r, a) in bumps {
        let d2 = (u - c[0]).powi(2) + (v - c[1]).powi(2);
        h += a * (-d2 / (2.0 * r * r)).exp();
    }
    h
}

/// Eye positions on a horizontal arc around the relief center.
pub fn arc_cameras(n_views: usize, center: [f64; 3], radius: f64, fx: f64, width: usize, height: usize) -> Vec<Camera> {
    (0..n_views)
        .map(|i| {
            let t = if n_views == 1 { 0.5 } else { i as f64 / (n_views - 1) as f64 };
            let ang = (-ARC_HALF_DEG + 2.0 * ARC_HALF_DEG * t).to_radians();
            let eye = [center[0] - radius * ang.sin(), center[1], center[2] - radius * ang.cos()];
            Camera::look_at(eye, center, [0.0, 1.0, 0.0], fx, fx, width, height)
        })
        .collect()
}

pub fn generate_scene(spec: &SceneSpec) -> Result<SceneBundle> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (w, h) = (spec.width, spec.height);
    let fx = w as f64;
    let d_mid = 0.5 * (spec.d_min + spec.d_max);
    // Half extents covering the widest view at the far plane.
    let arc = ARC_HALF_DEG.to_radians();
    let half_x = spec.d_max * (0.5 * w as f64 / fx) * 1.15 + d_mid * arc.sin();
    let half_y = spec.d_max * (0.5 * h as f64 / fx) * 1.15;

    let aspect = half_x / half_y;
    let ny = ((spec.n_gaussians as f64 / aspect).sqrt().round() as usize).max(1);
    let nx = spec.n_gaussians.div_ceil(ny);
    let spacing = (2.0 * half_x / nx as f64).max(2.0 * half_y / ny as f64);

    let bumps: Vec<([f64; 2], f64, f64)> =
        (0..5).map(|_| ([rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)], rng.gen_range(0.12..0.3), rng.gen_range(-0.4..0.6))).collect();
    let texture = Texture::new(&mut rng);

    let mut grid = Vec::with_capacity(nx * ny);
    for iy in 0..ny {
        for ix in 0..nx {
            let u = (ix as f64 + 0.5) / nx as f64;
            let v = (iy as f64 + 0.5) / ny as f64;
            grid.push((u, v, relief_height(&bumps, u, v)));
        }
    }
    let (lo, hi) = grid.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), g| (a.min(g.2), b.max(g.2)));
    let span = (hi - lo).max(1e-9);
    // Leave margin so rendered depth stays inside [d_min, d_max] after blending.
    let (z0, z1) = (spec.d_min + 0.1 * (spec.d_max - spec.d_min), spec.d_max - 0.1 * (spec.d_max - spec.d_min));

    let cloud: Vec<GaussianPrimitive> = grid
        .iter()
        .take(spec.n_gaussians)
        .map(|&(u, v, hgt)| {
            let z = z0 + (z1 - z0) * (hgt - lo) / span;
            let x = -half_x + 2.0 * half_x * u;
            let y = -half_y + 2.0 * half_y * v;
            let jitter = [rng.gen_range(-0.1..0.1) * spacing, rng.gen_range(-0.1..0.1) * spacing];
            let mut g = GaussianPrimitive::isotropic([x + jitter[0], y + jitter[1], z], 0.6 * spacing, 0.95, texture.color(u, v));
            g.log_scale[2] = (0.3 * spacing).ln();
            g
        })
        .collect();

    let cameras = arc_cameras(spec.n_views, [0.0, 0.0, d_mid], d_mid, fx, w, h);
    let cfg = RenderConfig::default();
    let mut clean = Vec::with_capacity(spec.n_views);
    let mut depth = Vec::with_capacity(spec.n_views);
    let mut degraded = Vec::with_capacity(spec.n_views);
    for (i, cam) in cameras.iter().enumerate() {
        let out = rasterize(&cloud, cam, &cfg);
        if out.alpha.mean() < MIN_COVERAGE {
            return Err(Error::GenerationFailed(format!("view {i} covers only {:.2} of the image", out.alpha.mean())));
        }
        degraded.push(degrade(&out.color, &out.depth, spec.beta, spec.b, spec.b_inf)?);
        clean.push(out.color);
        depth.push(out.depth);
    }
    Ok(SceneBundle { spec: spec.clone(), cloud, cameras, clean, depth, degraded })
}

/// Small degraded images with class labels for fitting the water classifier.
pub fn tinted_corpus(seed: u64, per_class: usize, size: usize) -> Vec<(ColorField, WaterClass)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(3 * per_class);
    for _ in 0..per_class {
        for class in WaterClass::ALL {
            let (beta, b, b_inf) = sample_medium(class, &mut rng);
            let tex = Texture::new(&mut rng);
            let (d0, d1) = (rng.gen_range(2.0..4.0), rng.gen_range(4.5..8.0));
            let n = size.max(2) as f64 - 1.0;
            let j = ColorField::from_fn(size, size, |x, y| tex.color(x as f64 / n, y as f64 / n));
            let d = ScalarField::from_fn(size, size, |_, y| d0 + (d1 - d0) * y as f64 / n);
            let img = degrade(&j, &d, beta, b, b_inf).expect("dims match");
            out.push((img, class));
        }
    }
    out
}

/// Classifier fit on a fixed tinted corpus; deterministic.
pub fn default_classifier() -> Result<ClassifierWeights> {
    let samples: Vec<([f64; 3], WaterClass)> = tinted_corpus(11, 30, 16).iter().map(|(img, c)| (img.channel_means(), *c)).collect();
    fit_classifier(&samples, &FitConfig::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapt::{classify_water, water_index_heuristic, HeuristicConfig};

    fn small(class: WaterClass, seed: u64) -> SceneSpec {
        SceneSpec::sample(class, seed, 64, 24, 20, 3)
    }

    #[test]
    fn degrade_cases() {
        let j = ColorField::from_fn(4, 3, |x, y| [0.1 * x as f64, 0.2, 0.1 * y as f64]);
        let zero = ScalarField::filled(4, 3, 0.0);
        assert_eq!(degrade(&j, &zero, [0.3, 0.1, 0.05], 0.2, [0.1, 0.4, 0.5]).unwrap(), j);

        let black = ColorField::filled(1, 1, [0.0; 3]);
        let i = degrade(&black, &ScalarField::filled(1, 1, 10.0), [0.0; 3], 0.1, [0.2, 0.5, 0.6]).unwrap();
        for (v, want) in i.data.iter().zip([0.1264, 0.3161, 0.3793]) {
            assert!((v - want).abs() < 5e-5);
        }
        let far = degrade(&j, &ScalarField::filled(4, 3, 1e4), [0.3, 0.1, 0.05], 0.2, [0.1, 0.4, 0.5]).unwrap();
        assert!(far.data.chunks(3).all(|p| p == [0.1, 0.4, 0.5]));
        assert!(degrade(&j, &ScalarField::filled(4, 3, -1.0), [0.0; 3], 0.0, [0.0; 3]).is_err());
        assert!(degrade(&j, &ScalarField::filled(3, 3, 1.0), [0.0; 3], 0.0, [0.0; 3]).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_scene(&small(WaterClass::Medium, 4)).unwrap();
        let b = generate_scene(&small(WaterClass::Medium, 4)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.clean.len(), 3);
    }

    #[test]
    fn neutral_medium_leaves_clean_images() {
        let mut spec = small(WaterClass::Clear, 5);
        spec.beta = [0.0; 3];
        spec.b = 0.0;
        let s = generate_scene(&spec).unwrap();
        assert_eq!(s.clean, s.degraded);
    }

    #[test]
    fn red_channel_decays_and_depth_in_range() {
        for class in WaterClass::ALL {
            let s = generate_scene(&small(class, 6)).unwrap();
            for (c, d) in s.clean.iter().zip(&s.degraded) {
                assert!(d.channel_means()[0] < c.channel_means()[0]);
            }
            let covered: Vec<f64> = s.depth[0].data.iter().cloned().filter(|&v| v < 19.0).collect();
            assert!(covered.len() as f64 > 0.95 * s.depth[0].len() as f64);
            let lo = covered.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = covered.iter().cloned().fold(0.0, f64::max);
            assert!(lo > 1.5 && hi < 9.0, "depth [{lo}, {hi}]");
        }
    }

    #[test]
    fn rejects_invalid_specs() {
        let mut s = small(WaterClass::Clear, 1);
        s.n_gaussians = 0;
        assert!(generate_scene(&s).is_err());
        let mut s = small(WaterClass::Clear, 1);
        s.d_min = 0.0;
        assert!(generate_scene(&s).is_err());
        let mut s = small(WaterClass::Clear, 1);
        s.b_inf = [1.2, 0.1, 0.1];
        assert!(generate_scene(&s).is_err());
    }

    #[test]
    fn class_ranges() {
        for seed in 0..20 {
            let c = SceneSpec::sample(WaterClass::Clear, seed, 1, 8, 8, 1);
            assert!((0.02..=0.06).contains(&c.b) && c.b_inf[2] > c.b_inf[1]);
            let t = SceneSpec::sample(WaterClass::Turbid, seed, 1, 8, 8, 1);
            assert!((0.15..=0.35).contains(&t.b) && t.b_inf[1] > t.b_inf[2]);
        }
    }

    #[test]
    fn corpus_classifier_and_heuristic_agree() {
        let cw = default_classifier().unwrap();
        let test = tinted_corpus(12, 30, 16);
        let hc = HeuristicConfig::default();
        let mut correct = 0;
        let mut agree = 0;
        for (img, class) in &test {
            let p = classify_water(img, &cw).unwrap();
            correct += (p.class() == *class) as usize;
            let hw = water_index_heuristic(img, &hc).unwrap();
            agree += (WaterClass::from_index_value(hw) == p.class()) as usize;
        }
        let n = test.len() as f64;
        assert!(correct as f64 >= 0.9 * n, "accuracy {correct}/{n}");
        assert!(agree as f64 >= 0.9 * n, "agreement {agree}/{n}");

        let blue = ColorField::filled(4, 4, [0.1, 0.3, 0.6]);
        assert_eq!(classify_water(&blue, &cw).unwrap().class(), WaterClass::Clear);
    }
}
