//! Degradations against straight-line scalar transcriptions of their formulas.

use cpa_enhancer::degrade::{
    apply_dark, apply_fog, apply_noise, apply_snow, composite_rain, fog_beta, noise_field, rain_field, snow_mask,
    Degradation, DegradationKind, DegradationSpec, RainBlend, RainParams, SnowDensity,
};
use cpa_enhancer::image::{Image, Mask};
use proptest::prelude::*;

const TOL: f64 = 1e-6;

fn test_image(size: usize, seed: u64) -> Image {
    Image::from_fn(size, size, |y, x, c| {
        let v = ((y * 31 + x * 17 + c * 7) as u64 ^ seed.wrapping_mul(2_654_435_761)) % 251;
        v as f64 / 250.0
    })
}

fn max_diff(a: &Image, b: impl Fn(usize, usize, usize) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for y in 0..a.height() {
        for x in 0..a.width() {
            for c in 0..3 {
                worst = worst.max((a.get(y, x, c) - b(y, x, c)).abs());
            }
        }
    }
    worst
}

fn clamp01(v: f64) -> f64 {
    v.max(0.0).min(1.0)
}

#[test]
fn fog_matches_scalar_scattering_model() {
    let img = test_image(32, 1);
    for i in [0u32, 4, 9] {
        for a in [0.5, 0.8] {
            let out = apply_fog(&img, a, i).unwrap();
            let beta = 0.05 + 0.01 * i as f64;
            let d = max_diff(&out, |y, x, c| {
                let rho = ((y as f64 - 16.0).powi(2) + (x as f64 - 16.0).powi(2)).sqrt();
                let depth = -0.04 * rho + 32f64.sqrt();
                let t = (-beta * depth).exp();
                clamp01(img.get(y, x, c) * t + a * (1.0 - t))
            });
            assert!(d < TOL, "fog i={i} A={a}: {d}");
        }
    }
}

#[test]
fn fog_levels_follow_linear_schedule() {
    for i in 0..=9 {
        assert!((fog_beta(i).unwrap() - (0.05 + 0.01 * i as f64)).abs() < 1e-15);
    }
    assert!(fog_beta(10).is_err());
}

#[test]
fn fog_center_pixel_hand_value() {
    // ρ = 0 at the center, d = sqrt(32), β = 0.05, A = 0.5, I = 1.
    let img = Image::filled(32, 32, 1.0);
    let out = apply_fog(&img, 0.5, 0).unwrap();
    let t = (-0.05 * 32f64.sqrt()).exp();
    assert!((out.get(16, 16, 0) - (t + 0.5 * (1.0 - t))).abs() < 1e-12);
    assert!((out.get(16, 16, 0) - 0.876_82).abs() < 1e-5);
}

#[test]
fn dark_matches_gamma_and_identity_is_exact() {
    let img = test_image(32, 2);
    for gamma in [1.5, 2.2, 5.0] {
        let out = apply_dark(&img, gamma).unwrap();
        assert!(max_diff(&out, |y, x, c| img.get(y, x, c).powf(gamma)) < TOL);
    }
    assert_eq!(apply_dark(&img, 1.0).unwrap(), img);
    assert!(apply_dark(&img, 0.0).is_err());
}

#[test]
fn snow_is_clamped_addition_and_zero_mask_is_identity() {
    let img = test_image(32, 3);
    let mask = snow_mask(32, 32, SnowDensity::Heavy, 9);
    let out = apply_snow(&img, &mask);
    assert!(max_diff(&out, |y, x, c| clamp01(img.get(y, x, c) + mask.values[y * 32 + x])) < TOL);
    assert_eq!(apply_snow(&img, &Mask::zeros(32, 32)), img);
}

#[test]
fn rain_matches_both_blends() {
    let img = test_image(32, 4);
    let field = rain_field(32, 32, 5, &RainParams::default()).unwrap();
    let r = |y: usize, x: usize| field.values[y * 32 + x];
    let beta = 0.8;
    let printed = composite_rain(&img, &field, beta, RainBlend::Printed).unwrap();
    assert!(max_diff(&printed, |y, x, c| {
        let i = img.get(y, x, c);
        clamp01(i * (1.0 - r(y, x)) + beta * i)
    }) < TOL);
    let overlay = composite_rain(&img, &field, beta, RainBlend::Overlay).unwrap();
    assert!(max_diff(&overlay, |y, x, c| clamp01(img.get(y, x, c) * (1.0 - r(y, x)) + beta * r(y, x))) < TOL);
    assert_eq!(composite_rain(&img, &Mask::zeros(32, 32), 0.0, RainBlend::Printed).unwrap(), img);
}

#[test]
fn rain_field_is_normalized_streaks() {
    let field = rain_field(48, 48, 11, &RainParams::default()).unwrap();
    let max = field.values.iter().cloned().fold(f64::MIN, f64::max);
    assert_eq!(max, 1.0);
    assert!(field.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
    // Roughly 3% of pixels seed drops; blurring spreads them further.
    let covered = field.values.iter().filter(|&&v| v > 0.0).count();
    assert!(covered > 48 * 48 * 3 / 100);
}

#[test]
fn noise_matches_scaled_gaussian_and_zero_sigma_is_identity() {
    let img = test_image(32, 6);
    let n = noise_field(32, 32, 7);
    for sigma in [15.0, 25.0, 50.0] {
        let out = apply_noise(&img, sigma, 7).unwrap();
        assert!(max_diff(&out, |y, x, c| clamp01(img.get(y, x, c) + n[(y * 32 + x) * 3 + c] * sigma / 255.0)) < TOL);
    }
    assert_eq!(apply_noise(&img, 0.0, 7).unwrap(), img);
}

#[test]
fn noise_deviation_matches_sigma() {
    // Mid-gray keeps 0.5 ± 5σ/255 inside [0, 1], so nothing is clamped.
    let img = Image::filled(256, 256, 0.5);
    let out = apply_noise(&img, 15.0, 21).unwrap();
    let diffs: Vec<f64> = out.pixels().iter().map(|v| v - 0.5).collect();
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / diffs.len() as f64;
    let ratio = var.sqrt() / (15.0 / 255.0);
    assert!((ratio - 1.0).abs() < 0.02, "{ratio}");
}

#[test]
fn snow_hand_examples() {
    let mask = |v: f64| Mask { height: 1, width: 1, values: vec![v] };
    assert_eq!(apply_snow(&Image::filled(1, 1, 0.9), &mask(0.5)).get(0, 0, 0), 1.0);
    assert!((apply_snow(&Image::filled(1, 1, 0.2), &mask(0.3)).get(0, 0, 1) - 0.5).abs() < 1e-15);
}

#[test]
fn none_spec_is_identity() {
    let img = test_image(16, 8);
    assert_eq!(DegradationSpec::new(Degradation::None, 3).apply(&img).unwrap(), img);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn outputs_stay_in_unit_range_and_are_seed_deterministic(
        seed in 0u64..1000,
        kind in prop::sample::select(DegradationKind::ALL.to_vec()),
        size in 8usize..24,
    ) {
        let img = test_image(size, seed);
        let spec = cpa_enhancer::dataset::sample_spec(kind, seed);
        let a = spec.apply(&img).unwrap();
        let b = spec.apply(&img).unwrap();
        prop_assert!(a.in_unit_range());
        prop_assert_eq!(&a, &b);
        let json = serde_json::to_string(&spec).unwrap();
        let back: DegradationSpec = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(back, spec);
    }
}

#[test]
fn spec_json_roundtrip_is_bit_exact() {
    let spec = DegradationSpec::new(Degradation::Dark { gamma: 3.4496507195615282 }, 680);
    let back: DegradationSpec = serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
    assert_eq!(back, spec);
}
