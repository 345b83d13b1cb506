mod common;

use common::*;
use dimo_core::vfa::{
    signal_factor, signal_factor_dt1, vfa_fidelity_grad, vfa_fit, vfa_forward, AcquisitionProtocol, FitSettings,
    MultiFlipImages, ParamMaps,
};
use ndarray::{Array2, Array3};
use num_complex::Complex64;
use proptest::prelude::*;

fn uniform(t1: f64, i0: Complex64) -> ParamMaps {
    ParamMaps::new(Array2::from_elem((2, 2), t1), Array2::from_elem((2, 2), i0)).unwrap()
}

#[test]
fn signal_factor_hand_value() {
    let e1 = (-0.04f64).exp();
    let a = 10f64.to_radians();
    let expected = (1.0 - e1) * a.sin() / (1.0 - e1 * a.cos());
    assert!((signal_factor(1.0, a, 0.04) - expected).abs() < 1e-15);
    assert!((signal_factor(1.0, a, 0.04) - 0.126542).abs() < 1e-6);
}

#[test]
fn fit_recovers_design_values() {
    let proto = four_angle_protocol();
    for t1 in [0.2, 0.5, 0.895, 1.0, 1.311, 2.0, 3.0] {
        let params = uniform(t1, Complex64::from_polar(0.8, 0.4));
        let fit = vfa_fit(&vfa_forward(&params, &proto).unwrap(), &proto, &FitSettings::default()).unwrap();
        assert!(fit.valid.iter().all(|v| *v));
        for (&got, &want) in fit.params.t1().iter().zip(params.t1()) {
            assert!(rel_err(got, want) < 1e-6, "{got} vs {want}");
        }
        for (got, want) in fit.params.i0().iter().zip(params.i0()) {
            assert!((got - want).norm() < 1e-6);
        }
    }
}

#[test]
fn zero_signal_is_flagged_invalid() {
    let proto = four_angle_protocol();
    let imgs = MultiFlipImages::new(Array3::zeros((4, 2, 2))).unwrap();
    let fit = vfa_fit(&imgs, &proto, &FitSettings::default()).unwrap();
    assert!(fit.valid.iter().all(|v| !*v));
    assert!(fit.params.t1().iter().all(|&t| t == FitSettings::default().t1_floor));
    assert!(fit.params.i0().iter().all(|v| v.norm() == 0.0));
}

#[test]
fn forward_is_zero_for_zero_density() {
    let imgs = vfa_forward(&uniform(1.0, Complex64::new(0.0, 0.0)), &four_angle_protocol()).unwrap();
    assert!(imgs.imgs().iter().all(|v| v.norm() == 0.0));
}

#[test]
fn ernst_angle_maximizes_the_signal() {
    let tr: f64 = 0.04;
    for t1 in [0.3, 0.895, 1.311, 2.5] {
        let ernst = (-tr / t1).exp().acos();
        let grid: Vec<f64> = (1..9000).map(|k| k as f64 * 1e-4 * std::f64::consts::FRAC_PI_2 / 0.9).collect();
        let best = grid
            .iter()
            .copied()
            .filter(|a| *a < std::f64::consts::FRAC_PI_2)
            .max_by(|a, b| signal_factor(t1, *a, tr).total_cmp(&signal_factor(t1, *b, tr)))
            .unwrap();
        assert!((best - ernst).abs() < 2e-4, "t1={t1}: {best} vs {ernst}");
    }
}

#[test]
fn b1_scale_multiplies_flip_angles() {
    let b1 = Array2::from_elem((2, 2), 1.1);
    let proto = AcquisitionProtocol::from_degrees(0.04, &[5.0, 10.0, 20.0, 40.0]).unwrap().with_b1_scale(b1).unwrap();
    let imgs = vfa_forward(&uniform(1.0, Complex64::new(1.0, 0.0)), &proto).unwrap();
    let expected = signal_factor(1.0, 20f64.to_radians() * 1.1, 0.04);
    assert!((imgs.imgs()[[2, 0, 0]].re - expected).abs() < 1e-14);
    let fit = vfa_fit(&imgs, &proto, &FitSettings::default()).unwrap();
    assert!(rel_err(fit.params.t1()[[1, 1]], 1.0) < 1e-6);
}

#[test]
fn invalid_protocols_are_rejected() {
    assert!(AcquisitionProtocol::from_degrees(0.0, &[5.0, 10.0]).is_err());
    assert!(AcquisitionProtocol::from_degrees(0.04, &[5.0]).is_err());
    assert!(AcquisitionProtocol::from_degrees(0.04, &[5.0, 95.0]).is_err());
}

#[test]
fn fidelity_gradient_matches_finite_differences() {
    let mut r = rng(21);
    let acq = random_quant_acquisition(8, 8, 2, &mut r);
    let proto = four_angle_protocol();
    let params = random_params(8, 8, &mut r);
    let grad = vfa_fidelity_grad(&params, &acq, &proto).unwrap();
    let loss = |p: &ParamMaps| acq.fidelity_loss(p, &proto).unwrap();
    for idx in [(0, 0), (3, 4), (7, 7), (5, 2)] {
        let h = 1e-6;
        let (t1, i0) = (params.t1().clone(), params.i0().clone());
        let shifted = |dt: f64, di: Complex64| {
            let mut t = t1.clone();
            let mut i = i0.clone();
            t[idx] += dt;
            i[idx] += di;
            ParamMaps::new(t, i).unwrap()
        };
        let zero = Complex64::new(0.0, 0.0);
        let fd_t1 = (loss(&shifted(h, zero)) - loss(&shifted(-h, zero))) / (2.0 * h);
        let fd_re =
            (loss(&shifted(0.0, Complex64::new(h, 0.0))) - loss(&shifted(0.0, Complex64::new(-h, 0.0)))) / (2.0 * h);
        let fd_im =
            (loss(&shifted(0.0, Complex64::new(0.0, h))) - loss(&shifted(0.0, Complex64::new(0.0, -h)))) / (2.0 * h);
        assert!(rel_err(fd_t1, grad.t1[idx]) < 1e-4, "T1 {idx:?}: {fd_t1} vs {}", grad.t1[idx]);
        assert!(rel_err(fd_re, grad.i0[idx].re) < 1e-4, "Re I0 {idx:?}");
        assert!(rel_err(fd_im, grad.i0[idx].im) < 1e-4, "Im I0 {idx:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fit_inverts_forward(t1 in 0.2f64..3.0, mag in 0.1f64..5.0, phase in -3.1f64..3.1) {
        let proto = four_angle_protocol();
        let params = uniform(t1, Complex64::from_polar(mag, phase));
        let fit = vfa_fit(&vfa_forward(&params, &proto).unwrap(), &proto, &FitSettings::default()).unwrap();
        prop_assert!(rel_err(fit.params.t1()[[0, 0]], t1) < 1e-6);
        prop_assert!((fit.params.i0()[[0, 0]] - params.i0()[[0, 0]]).norm() < 1e-6 * mag);
    }

    #[test]
    fn forward_is_linear_in_density(t1 in 0.2f64..3.0, scale in -4.0f64..4.0) {
        let proto = four_angle_protocol();
        let a = vfa_forward(&uniform(t1, Complex64::new(1.0, 0.5)), &proto).unwrap();
        let b = vfa_forward(&uniform(t1, Complex64::new(scale, 0.5 * scale)), &proto).unwrap();
        for (x, y) in a.imgs().iter().zip(b.imgs()) {
            prop_assert!((x * scale - y).norm() < 1e-12);
        }
    }

    #[test]
    fn t1_derivative_matches_finite_difference(t1 in 0.2f64..3.0, deg in 1.0f64..80.0) {
        let a = deg.to_radians();
        let h = 1e-6;
        let fd = (signal_factor(t1 + h, a, 0.04) - signal_factor(t1 - h, a, 0.04)) / (2.0 * h);
        prop_assert!(rel_err(fd, signal_factor_dt1(t1, a, 0.04)) < 1e-5);
    }
}
