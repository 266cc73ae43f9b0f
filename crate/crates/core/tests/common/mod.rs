//! Invariant properties shared by the property-test target and the
//! acceptance harness.
#![allow(dead_code)]

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRng, TestRunner};

use uwsplat::adapt::{classify_water, ClassifierWeights};
use uwsplat::attenuation::{attenuation_map_with_edge, AttenuationParams};
use uwsplat::field::{downsample, sobel_gradients, upsample, ColorField, ScalarField};
use uwsplat::losses::LossWeights;
use uwsplat::renderer::{rasterize, Camera, GaussianPrimitive, RenderConfig};
use uwsplat::scattering::{scattering_map, ScatterConfig, ScatterParams};

pub const CASES: u32 = 64;

/// Runs `test` over `cases` deterministic draws from `strategy`.
pub fn check<S: Strategy>(strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String> {
    let config = Config { cases: CASES, failure_persistence: None, ..Config::default() };
    let rng = TestRng::deterministic_rng(config.rng_algorithm);
    TestRunner::new_with_rng(config, rng).run(&strategy, test).map_err(|e| e.to_string())
}

fn rgb(lo: f64, hi: f64) -> impl Strategy<Value = [f64; 3]> {
    [lo..hi, lo..hi, lo..hi]
}

fn field(w: usize, h: usize, lo: f64, hi: f64) -> impl Strategy<Value = ScalarField> {
    prop::collection::vec(lo..hi, w * h).prop_map(move |d| ScalarField::new(w, h, d).expect("sized"))
}

/// `A` lies in (0, 1] and never increases with depth.
pub fn attenuation_bounded_and_monotone() -> Result<(), String> {
    let s = (rgb(0.01, 2.0), rgb(0.5, 1.5), 0.0..1.0f64, 0.0..1.0f64, 1.0..1.2f64, 0.0..25.0f64, 0.0..25.0f64);
    check(s, |(beta, w_c, gamma, e, t_mod, d0, dd)| {
        let p = AttenuationParams::from_beta(beta, w_c, gamma);
        let depth = ScalarField::new(2, 1, vec![d0, d0 + dd]).unwrap();
        let edge = ScalarField::filled(2, 1, e);
        let a = attenuation_map_with_edge(&depth, &edge, &p, t_mod).unwrap();
        let (near, far) = (a.get(0, 0), a.get(1, 0));
        for c in 0..3 {
            prop_assert!(near[c] > 0.0 && near[c] <= 1.0, "A = {}", near[c]);
            prop_assert!(far[c] > 0.0 && far[c] <= 1.0, "A = {}", far[c]);
            prop_assert!(far[c] <= near[c]);
        }
        Ok(())
    })
}

/// Under neutral modulators `B` lies in [0, B_inf) and never decreases with depth.
pub fn backscatter_bounded_and_monotone() -> Result<(), String> {
    let s = (rgb(0.01, 0.99), 0.01..1.0f64, 0.0..30.0f64, 0.0..30.0f64, any::<u64>());
    check(s, |(b_inf, b, d0, dd, seed)| {
        let p = ScatterParams::init(seed, b_inf, b, 0.5, 0.05);
        let depth = ScalarField::new(2, 1, vec![d0, (d0 + dd).min(30.0)]).unwrap();
        let out = scattering_map(&depth, &p, &ScatterConfig::neutral()).unwrap();
        let (near, far) = (out.backscatter.get(0, 0), out.backscatter.get(1, 0));
        let binf = p.b_inf();
        for c in 0..3 {
            prop_assert!(near[c] >= 0.0 && near[c] < binf[c]);
            prop_assert!(far[c] >= 0.0 && far[c] < binf[c]);
            prop_assert!(far[c] >= near[c]);
        }
        Ok(())
    })
}

/// `B_s + exp(-tau) = 1` with every modulator active.
pub fn opacity_complements_transmission() -> Result<(), String> {
    let s = (field(8, 8, 0.5, 12.0), rgb(0.05, 0.9), 0.01..0.5f64, 0.0..1.0f64, 0.0..0.3f64, any::<u64>());
    check(s, |(depth, b_inf, b, lambda, delta, seed)| {
        let p = ScatterParams::init(seed, b_inf, b, lambda, delta);
        let out = scattering_map(&depth, &p, &ScatterConfig::default()).unwrap();
        for (bs, tau) in out.opacity.data.iter().zip(&out.tau.data) {
            prop_assert!((bs + (-tau).exp() - 1.0).abs() <= 1e-15, "B_s {bs} tau {tau}");
        }
        Ok(())
    })
}

/// Red attenuates fastest and blue slowest with the default coefficients.
pub fn wavelength_ordering() -> Result<(), String> {
    let s = (1e-3..50.0f64, 0.0..1.0f64, 1.0..1.2f64);
    check(s, |(d, e, t_mod)| {
        let p = AttenuationParams::default();
        let a = attenuation_map_with_edge(&ScalarField::filled(1, 1, d), &ScalarField::filled(1, 1, e), &p, t_mod).unwrap();
        let [r, g, b] = a.get(0, 0);
        prop_assert!(r < g && g < b, "A = ({r}, {g}, {b}) at D = {d}");
        Ok(())
    })
}

fn gaussian() -> impl Strategy<Value = GaussianPrimitive> {
    ((-0.5..0.5f64, -0.5..0.5f64, 1.5..5.0f64), [0.2..1.0f64, -0.5..0.5, -0.5..0.5, -0.5..0.5], rgb(-2.5, -1.0), -3.0..4.0f64, rgb(0.0, 1.0)).prop_map(
        |((x, y, z), rotation, log_scale, opacity, color)| GaussianPrimitive { mean: [x, y, z], rotation, log_scale, opacity, color },
    )
}

/// Accumulated alpha stays in [0, 1] and the output ignores input order.
pub fn rasterizer_alpha_and_order() -> Result<(), String> {
    let s = (prop::collection::vec(gaussian(), 1..7), any::<prop::sample::Index>());
    check(s, |(cloud, shift)| {
        let cam = Camera::look_at([0.0; 3], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0], 12.0, 12.0, 12, 10);
        let cfg = RenderConfig::default();
        let out = rasterize(&cloud, &cam, &cfg);
        prop_assert!(out.alpha.data.iter().all(|a| (0.0..=1.0).contains(a)));
        let mut rotated = cloud.clone();
        rotated.rotate_left(shift.index(cloud.len()));
        prop_assert_eq!(&rasterize(&rotated, &cam, &cfg), &out);
        let mut reversed = cloud;
        reversed.reverse();
        prop_assert_eq!(&rasterize(&reversed, &cam, &cfg), &out);
        Ok(())
    })
}

/// Water-class probabilities lie on the simplex.
pub fn classifier_simplex() -> Result<(), String> {
    let s = (any::<u64>(), prop::collection::vec(rgb(0.0, 1.0), 16));
    check(s, |(seed, px)| {
        let img = ColorField::new(4, 4, px.concat()).unwrap();
        let p = classify_water(&img, &ClassifierWeights::random(seed)).unwrap();
        prop_assert!(p.probs.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!((p.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&p.w));
        Ok(())
    })
}

/// `alpha(w) + beta(w) = 2`, with the endpoint values reproduced exactly.
pub fn water_coefficients_sum() -> Result<(), String> {
    let lw = LossWeights::default();
    if lw.path_coefficients(0.0) != (1.2, 0.8) || lw.path_coefficients(1.0) != (0.8, 1.2) {
        return Err(format!("endpoints {:?} {:?}", lw.path_coefficients(0.0), lw.path_coefficients(1.0)));
    }
    check(0.0..=1.0f64, |w| {
        let (a, b) = lw.path_coefficients(w);
        prop_assert!((a + b - 2.0).abs() <= 1e-15, "w = {w}: {a} + {b}");
        Ok(())
    })
}

/// Downsampling then upsampling a constant field returns it unchanged.
pub fn pyramid_constant_round_trip() -> Result<(), String> {
    let s = (1usize..20, 1usize..20, -5.0..5.0f64, prop::sample::select(vec![2usize, 4]));
    check(s, |(w, h, v, f)| {
        let c = ScalarField::filled(w, h, v);
        let d = downsample(&c, f).unwrap();
        prop_assert_eq!(d.dims(), (w.div_ceil(f), h.div_ceil(f)));
        let u = upsample(&d, f, w, h).unwrap();
        prop_assert!(u.data.iter().all(|x| (x - v).abs() <= 1e-12 * v.abs().max(1.0)));
        Ok(())
    })
}

/// Sobel gradients are linear in the input.
pub fn sobel_linear() -> Result<(), String> {
    let s = (field(6, 5, -1.0, 1.0), -3.0..3.0f64);
    check(s, |(f, a)| {
        let (gx, gy) = sobel_gradients(&f).unwrap();
        let (sx, sy) = sobel_gradients(&f.map(|v| a * v)).unwrap();
        for (g, s) in gx.data.iter().chain(&gy.data).zip(sx.data.iter().chain(&sy.data)) {
            prop_assert!((a * g - s).abs() <= 1e-12);
        }
        Ok(())
    })
}

/// The invariant suite, in report order.
pub const INVARIANTS: &[(&str, fn() -> Result<(), String>)] = &[
    ("attenuation in (0,1], monotone in D", attenuation_bounded_and_monotone),
    ("backscatter in [0,B_inf), monotone in D", backscatter_bounded_and_monotone),
    ("B_s + exp(-tau) = 1", opacity_complements_transmission),
    ("A_r < A_g < A_b at D > 0", wavelength_ordering),
    ("rasterizer alpha in [0,1], order invariant", rasterizer_alpha_and_order),
    ("classifier probabilities on the simplex", classifier_simplex),
    ("alpha(w) + beta(w) = 2, exact endpoints", water_coefficients_sum),
];
