mod common;

use common::*;
use dimo_core::mri::{
    apply_adjoint, apply_forward, data_consistency, fft2c, ifft2c, kspace_fidelity_grad, kspace_fidelity_loss,
    make_cartesian_mask, make_poisson_mask, CoilMaps, ComplexImage, ForwardModel, KSpace, SamplingMask,
};
use ndarray::{Array2, Array3};
use num_complex::Complex64;
use proptest::prelude::*;

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

#[test]
fn forward_matches_explicit_encoding_matrix() {
    for seed in 0..3 {
        let mut r = rng(seed);
        let model = ForwardModel::new(raw_maps(2, 8, 8, &mut r), random_mask(8, 8, &mut r)).unwrap();
        let x = random_complex2(8, 8, &mut r);
        let a = encoding_matrix(&model);
        let expected = matvec(&a, x.as_slice().unwrap());
        let got = apply_forward(&model, &ComplexImage::new(x).unwrap()).unwrap();
        let scale = expected.iter().map(|v| v.norm()).fold(0.0, f64::max);
        assert!(max_abs_diff(got.data().iter(), expected.iter()) / scale < 1e-8);
    }
}

#[test]
fn adjoint_matches_conjugate_transpose() {
    let mut r = rng(5);
    let model = ForwardModel::new(raw_maps(2, 8, 8, &mut r), random_mask(8, 8, &mut r)).unwrap();
    let k = masked(random_complex3(2, 8, 8, &mut r), model.mask());
    let a = encoding_matrix(&model);
    let ah = a.t().mapv(|v| v.conj());
    let expected = matvec(&ah, k.data().as_slice().unwrap());
    let got = apply_adjoint(&model, &k).unwrap();
    assert!(max_abs_diff(got.data().iter(), expected.iter()) < 1e-10);
}

#[test]
fn constant_image_has_single_center_bin() {
    let x = Array2::from_elem((8, 6), c(2.5, -1.0));
    let k = fft2c(&x.view()).unwrap();
    let peak = c(2.5, -1.0) * (48f64).sqrt();
    for ((i, j), v) in k.indexed_iter() {
        if (i, j) == (4, 3) {
            assert!((v - peak).norm() < 1e-12);
        } else {
            assert!(v.norm() < 1e-12);
        }
    }
}

#[test]
fn fft_matches_direct_dft() {
    let x = random_complex2(8, 8, &mut rng(11));
    let fast = fft2c(&x.view()).unwrap();
    let slow = direct_dft2(&x);
    assert!(max_abs_diff(fast.iter(), slow.iter()) < 1e-10);
}

#[test]
fn odd_dimensions_are_rejected() {
    assert!(fft2c(&Array2::<Complex64>::zeros((7, 8)).view()).is_err());
    assert!(ifft2c(&Array2::<Complex64>::zeros((8, 5)).view()).is_err());
}

#[test]
fn single_unit_coil_full_mask_is_plain_fft() {
    let x = random_complex2(8, 8, &mut rng(2));
    let model = ForwardModel::new(CoilMaps::unit(8, 8).unwrap(), SamplingMask::full(8, 8).unwrap()).unwrap();
    let k = apply_forward(&model, &ComplexImage::new(x.clone()).unwrap()).unwrap();
    let direct = fft2c(&x.view()).unwrap();
    assert!(max_abs_diff(k.data().iter(), direct.iter()) < 1e-12);
    let back = apply_adjoint(&model, &k).unwrap();
    assert!(max_abs_diff(back.data().iter(), x.iter()) < 1e-12);
}

#[test]
fn zero_inputs_give_zero_outputs() {
    let mut r = rng(3);
    let model = ForwardModel::new(raw_maps(2, 8, 8, &mut r), random_mask(8, 8, &mut r)).unwrap();
    let k = apply_forward(&model, &ComplexImage::zeros(8, 8).unwrap()).unwrap();
    assert!(k.data().iter().all(|v| v.norm() == 0.0));
    let x = apply_adjoint(&model, &KSpace::zeros(2, 8, 8)).unwrap();
    assert!(x.data().iter().all(|v| v.norm() == 0.0));
}

#[test]
fn unsampled_bins_are_exactly_zero() {
    let mut r = rng(4);
    let model = ForwardModel::new(raw_maps(3, 8, 8, &mut r), random_mask(8, 8, &mut r)).unwrap();
    let k = apply_forward(&model, &ComplexImage::new(random_complex2(8, 8, &mut r)).unwrap()).unwrap();
    for plane in k.data().outer_iter() {
        for (v, m) in plane.iter().zip(model.mask().mask()) {
            if !m {
                assert_eq!(*v, c(0.0, 0.0));
            }
        }
    }
}

#[test]
fn shape_mismatches_are_rejected() {
    let mut r = rng(6);
    let model = ForwardModel::new(raw_maps(2, 8, 8, &mut r), random_mask(8, 8, &mut r)).unwrap();
    assert!(apply_forward(&model, &ComplexImage::zeros(8, 10).unwrap()).is_err());
    assert!(apply_adjoint(&model, &KSpace::zeros(3, 8, 8)).is_err());
    assert!(ForwardModel::new(raw_maps(2, 8, 8, &mut r), SamplingMask::full(6, 8).unwrap()).is_err());
}

#[test]
fn dc_hand_value_and_limits() {
    let full = SamplingMask::full(2, 2).unwrap();
    let fhat = KSpace::new(Array3::from_elem((1, 2, 2), c(2.0, 0.0))).unwrap();
    let f = KSpace::new(Array3::from_elem((1, 2, 2), c(4.0, 0.0))).unwrap();
    let half = data_consistency(&fhat, &f, &full, 0.5).unwrap();
    assert!(half.data().iter().all(|v| *v == c(3.0, 0.0)));
    assert_eq!(data_consistency(&fhat, &f, &full, 1.0).unwrap(), f);
    assert_eq!(data_consistency(&fhat, &f, &full, 0.0).unwrap(), fhat);
    assert!(data_consistency(&fhat, &f, &full, 1.5).is_err());
    assert!(data_consistency(&fhat, &f, &full, -0.1).is_err());
}

#[test]
fn dc_leaves_unsampled_bins_untouched() {
    let mut r = rng(7);
    let mask = random_mask(8, 8, &mut r);
    let fhat = KSpace::new(random_complex3(2, 8, 8, &mut r)).unwrap();
    let f = masked(random_complex3(2, 8, 8, &mut r), &mask);
    let out = data_consistency(&fhat, &f, &mask, 0.7).unwrap();
    for ((o, e), m) in out.data().iter().zip(fhat.data()).zip(mask.mask().iter().cycle()) {
        if !m {
            assert_eq!(o, e);
        }
    }
}

#[test]
fn fidelity_gradient_matches_finite_differences() {
    let mut r = rng(8);
    let model = ForwardModel::new(raw_maps(2, 8, 8, &mut r), random_mask(8, 8, &mut r)).unwrap();
    let fhat = KSpace::new(random_complex3(2, 8, 8, &mut r)).unwrap();
    let f = masked(random_complex3(2, 8, 8, &mut r), model.mask());
    let grad = kspace_fidelity_grad(&model, &fhat, &f).unwrap();
    let h = 1e-6;
    for idx in [(0, 0, 0), (0, 3, 4), (1, 4, 4), (1, 7, 2), (0, 5, 6)] {
        for dir in [c(1.0, 0.0), c(0.0, 1.0)] {
            let mut plus = fhat.data().clone();
            let mut minus = fhat.data().clone();
            plus[idx] += dir * h;
            minus[idx] -= dir * h;
            let lp = kspace_fidelity_loss(&model, &KSpace::new(plus).unwrap(), &f).unwrap();
            let lm = kspace_fidelity_loss(&model, &KSpace::new(minus).unwrap(), &f).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let analytic = if dir.re != 0.0 { grad.data()[idx].re } else { grad.data()[idx].im };
            assert!(rel_err(fd, analytic) < 1e-4 || (fd - analytic).abs() < 1e-8, "{idx:?} {fd} vs {analytic}");
        }
    }
}

#[test]
fn fidelity_gradient_simplifies_for_unit_coil() {
    let mut r = rng(9);
    let model = ForwardModel::new(CoilMaps::unit(8, 8).unwrap(), SamplingMask::full(8, 8).unwrap()).unwrap();
    let fhat = KSpace::new(random_complex3(1, 8, 8, &mut r)).unwrap();
    let f = KSpace::new(random_complex3(1, 8, 8, &mut r)).unwrap();
    let grad = kspace_fidelity_grad(&model, &fhat, &f).unwrap();
    let expected = fhat.data() - f.data();
    assert!(max_abs_diff(grad.data().iter(), expected.iter()) < 1e-12);
}

#[test]
fn fidelity_gradient_vanishes_on_consistent_data() {
    let mut r = rng(10);
    let maps = sos_maps(3, 8, 8, &mut r);
    let model = ForwardModel::new(maps.clone(), random_mask(8, 8, &mut r)).unwrap();
    let x = ComplexImage::new(random_complex2(8, 8, &mut r)).unwrap();
    let full = ForwardModel::new(maps, SamplingMask::full(8, 8).unwrap()).unwrap();
    let fhat = apply_forward(&full, &x).unwrap();
    let f = apply_forward(&model, &x).unwrap();
    let grad = kspace_fidelity_grad(&model, &fhat, &f).unwrap();
    assert!(grad.norm() < 1e-10);
}

#[test]
fn cartesian_mask_examples() {
    assert!(make_cartesian_mask(16, 16, 1.0, 4, 0).unwrap().mask().iter().all(|v| *v));
    for (n, center, lines) in [(320, 20, 80), (176, 16, 44)] {
        let m = make_cartesian_mask(n, n, 4.0, center, 1).unwrap();
        let cols: Vec<bool> = (0..n).map(|j| m.mask()[[0, j]]).collect();
        assert_eq!(cols.iter().filter(|v| **v).count(), lines);
        assert!(m.mask().rows().into_iter().all(|row| row.iter().zip(&cols).all(|(a, b)| a == b)));
        let start = n / 2 - center / 2;
        assert!(cols[start..start + center].iter().all(|v| *v));
    }
    assert!(make_cartesian_mask(64, 64, 8.0, 10, 0).is_err());
}

#[test]
fn poisson_mask_examples() {
    let m = make_poisson_mask(176, 176, 4.0, 51, 3).unwrap();
    let start = 88 - 25;
    for i in start..start + 51 {
        for j in start..start + 51 {
            assert!(m.mask()[[i, j]]);
        }
    }
    let frac = m.sampled_fraction();
    assert!((0.2..=0.3).contains(&frac), "{frac}");
    assert!(make_poisson_mask(32, 32, 1.0, 4, 0).unwrap().mask().iter().all(|v| *v));
}

#[test]
fn poisson_samples_respect_the_exclusion_radius() {
    let m = make_poisson_mask(64, 64, 4.0, 12, 9).unwrap();
    let r = m.min_distance().expect("poisson masks record their radius");
    let start = 32 - 6;
    let center = |i: usize, j: usize| (start..start + 12).contains(&i) && (start..start + 12).contains(&j);
    let pts: Vec<(f64, f64)> = m
        .mask()
        .indexed_iter()
        .filter(|((i, j), v)| **v && !center(*i, *j))
        .map(|((i, j), _)| (i as f64, j as f64))
        .collect();
    for (a, p) in pts.iter().enumerate() {
        for q in &pts[a + 1..] {
            assert!(((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt() >= r - 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn fft_is_unitary(seed in any::<u64>(), h in 1usize..6, w in 1usize..6) {
        let x = random_complex2(2 * h, 2 * w, &mut rng(seed));
        let k = fft2c(&x.view()).unwrap();
        let nx: f64 = x.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        let nk: f64 = k.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        prop_assert!((nx - nk).abs() < 1e-10 * nx.max(1.0));
        let back = ifft2c(&k.view()).unwrap();
        prop_assert!(max_abs_diff(back.iter(), x.iter()) < 1e-10);
    }

    #[test]
    fn forward_and_adjoint_are_adjoint(seed in any::<u64>(), coils in 1usize..4) {
        let mut r = rng(seed);
        let model = ForwardModel::new(raw_maps(coils, 8, 8, &mut r), random_mask(8, 8, &mut r)).unwrap();
        let x = ComplexImage::new(random_complex2(8, 8, &mut r)).unwrap();
        let y = masked(random_complex3(coils, 8, 8, &mut r), model.mask());
        let lhs = inner(apply_forward(&model, &x).unwrap().data().iter().copied(), y.data().iter().copied());
        let rhs = inner(x.data().iter().copied(), apply_adjoint(&model, &y).unwrap().data().iter().copied());
        prop_assert!((lhs - rhs).norm() <= 1e-8 * lhs.norm().max(1.0));
    }

    #[test]
    fn dc_is_idempotent_at_one_and_identity_at_zero(seed in any::<u64>()) {
        let mut r = rng(seed);
        let mask = random_mask(8, 8, &mut r);
        let fhat = KSpace::new(random_complex3(2, 8, 8, &mut r)).unwrap();
        let f = masked(random_complex3(2, 8, 8, &mut r), &mask);
        let once = data_consistency(&fhat, &f, &mask, 1.0).unwrap();
        prop_assert_eq!(data_consistency(&once, &f, &mask, 1.0).unwrap(), once);
        prop_assert_eq!(data_consistency(&fhat, &f, &mask, 0.0).unwrap(), fhat);
    }

    #[test]
    fn cartesian_masks_hold_their_invariants(seed in any::<u64>(), af in 1.5f64..6.0, center in 0usize..6) {
        let w = 64;
        let lines = (w as f64 / af).round() as usize;
        prop_assume!(center <= lines);
        let m = make_cartesian_mask(48, w, af, center, seed).unwrap();
        let count = (0..w).filter(|&j| m.mask()[[0, j]]).count();
        prop_assert_eq!(count, lines);
        let start = w / 2 - center / 2;
        prop_assert!((start..start + center).all(|j| m.mask()[[10, j]]));
        let frac = m.sampled_fraction();
        prop_assert!(frac >= 0.5 / af && frac <= 2.0 / af);
        prop_assert_eq!(make_cartesian_mask(48, w, af, center, seed).unwrap(), m);
    }

    #[test]
    fn poisson_masks_hit_their_budget(seed in any::<u64>(), af in 2.0f64..6.0) {
        let m = make_poisson_mask(48, 48, af, 6, seed).unwrap();
        let frac = m.sampled_fraction();
        prop_assert!(frac >= 0.5 / af && frac <= 2.0 / af, "{}", frac);
    }
}
