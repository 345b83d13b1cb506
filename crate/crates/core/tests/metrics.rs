mod common;

use common::*;
use dimo_core::metrics::{
    edge_mask, high_frequency_energy, mass_fraction, nmse, percentile, psnr, roi_stats, ssim, MeanStd, SsimParams,
    UncertaintyMaps,
};
use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;

fn random_image(seed: u64) -> Array2<f64> {
    let mut r = rng(seed);
    Array2::from_shape_simple_fn((16, 16), || r.random_range(0.0..1.0))
}

#[test]
fn metrics_match_brute_force_references() {
    for seed in 0..4 {
        let reference = random_image(seed);
        let noisy = &reference + &random_image(seed + 100).mapv(|v| 0.2 * (v - 0.5));
        let p = SsimParams::default();
        let range = reference.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(
            (ssim(&noisy.view(), &reference.view(), &p).unwrap()
                - brute_ssim(&noisy, &reference, 7, 0.01, 0.03, range))
            .abs()
                < 1e-10
        );
        assert!((psnr(&noisy.view(), &reference.view()).unwrap() - closed_form_psnr(&noisy, &reference)).abs() < 1e-10);
        assert!((nmse(&noisy.view(), &reference.view()).unwrap() - closed_form_nmse(&noisy, &reference)).abs() < 1e-10);
    }
}

#[test]
fn identical_images_are_perfect() {
    let x = random_image(3);
    assert!(psnr(&x.view(), &x.view()).unwrap().is_infinite());
    assert_eq!(nmse(&x.view(), &x.view()).unwrap(), 0.0);
    assert!((ssim(&x.view(), &x.view(), &SsimParams::default()).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn psnr_gains_six_decibels_per_halving() {
    let reference = random_image(5);
    let err = random_image(6).mapv(|v| v - 0.5);
    let a = psnr(&(&reference + &(&err * 0.1)).view(), &reference.view()).unwrap();
    let b = psnr(&(&reference + &(&err * 0.05)).view(), &reference.view()).unwrap();
    assert!((b - a - 20.0 * 2f64.log10()).abs() < 1e-10);
    assert!((b - a - 6.0206).abs() < 1e-4);
}

#[test]
fn mismatched_shapes_and_zero_reference_are_rejected() {
    let a = Array2::<f64>::zeros((4, 4));
    let b = Array2::<f64>::zeros((4, 5));
    assert!(psnr(&a.view(), &b.view()).is_err());
    assert!(nmse(&a.view(), &a.view()).is_err());
    assert!(psnr(&a.view(), &a.view()).is_err());
    assert!(ssim(&a.view(), &b.view(), &SsimParams::default()).is_err());
}

#[test]
fn uncertainty_maps_use_unbiased_variance() {
    let samples = vec![Array2::from_elem((2, 2), 1.0), Array2::from_elem((2, 2), 3.0)];
    let reference = Array2::from_elem((2, 2), 1.5);
    let maps = UncertaintyMaps::from_samples(&samples, &reference.view()).unwrap();
    assert!(maps.mean_img.iter().all(|&v| v == 2.0));
    assert!(maps.variance_map.iter().all(|&v| v == 2.0));
    assert!(maps.error_map.iter().all(|&v| v == 0.5));
    assert!(UncertaintyMaps::from_samples(&samples[..1], &reference.view()).is_err());
}

#[test]
fn roi_stats_and_mass_fraction() {
    let map = Array2::from_shape_fn((4, 4), |(i, j)| (i * 4 + j) as f64);
    let roi = Array2::from_shape_fn((4, 4), |(i, _)| i == 0);
    let s = roi_stats(&map.view(), &roi.view()).unwrap();
    assert_eq!(s, MeanStd::of([0.0, 1.0, 2.0, 3.0]).unwrap());
    assert!((mass_fraction(&map.view(), &roi.view()).unwrap() - 6.0 / 120.0).abs() < 1e-15);
    assert!(roi_stats(&map.view(), &Array2::from_elem((4, 4), false).view()).is_err());
}

#[test]
fn edge_mask_covers_a_step_and_its_dilation() {
    let step = Array2::from_shape_fn((16, 16), |(_, j)| if j < 8 { 0.0 } else { 1.0 });
    let m = edge_mask(&step.view(), 0.1, 2);
    for i in 0..16 {
        for j in 0..16 {
            assert_eq!(m[[i, j]], (5..=10).contains(&j), "({i}, {j})");
        }
    }
    assert!(edge_mask(&Array2::from_elem((8, 8), 1.0).view(), 0.1, 3).iter().all(|v| !*v));
}

#[test]
fn percentile_interpolates() {
    let mut v = vec![4.0, 1.0, 3.0, 2.0];
    assert_eq!(percentile(&mut v, 0.0).unwrap(), 1.0);
    assert_eq!(percentile(&mut v, 100.0).unwrap(), 4.0);
    assert_eq!(percentile(&mut v, 50.0).unwrap(), 2.5);
    assert!(percentile(&mut [], 50.0).is_err());
}

#[test]
fn smooth_maps_have_less_high_frequency_energy() {
    let smooth = Array2::from_shape_fn((16, 16), |(i, j)| 1.0 + 0.01 * (i + j) as f64);
    let rough = Array2::from_shape_fn((16, 16), |(i, j)| if (i + j) % 2 == 0 { 1.0 } else { 2.0 });
    assert!(high_frequency_energy(&smooth.view()) < high_frequency_energy(&rough.view()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn nmse_is_scale_invariant(seed in any::<u64>(), alpha in 0.01f64..100.0) {
        let r = random_image(seed).mapv(|v| v + 0.1);
        let v = random_image(seed ^ 1);
        let a = nmse(&v.view(), &r.view()).unwrap();
        let b = nmse(&(&v * alpha).view(), &(&r * alpha).view()).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
    }

    #[test]
    fn psnr_decreases_with_error(seed in any::<u64>(), small in 0.01f64..0.5, factor in 1.01f64..4.0) {
        let r = random_image(seed).mapv(|v| v + 0.1);
        let e = random_image(seed ^ 7).mapv(|v| v - 0.5);
        let a = psnr(&(&r + &(&e * small)).view(), &r.view()).unwrap();
        let b = psnr(&(&r + &(&e * (small * factor))).view(), &r.view()).unwrap();
        prop_assert!(b < a);
    }

    #[test]
    fn ssim_is_symmetric_and_bounded(seed in any::<u64>()) {
        let a = random_image(seed);
        let b = random_image(seed ^ 3);
        let p = SsimParams { data_range: Some(1.0), ..SsimParams::default() };
        let ab = ssim(&a.view(), &b.view(), &p).unwrap();
        let ba = ssim(&b.view(), &a.view(), &p).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((-1.0..=1.0 + 1e-12).contains(&ab));
    }
}
