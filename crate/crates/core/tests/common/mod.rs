//! Random instances and brute-force reference implementations shared by the
//! integration tests.

#![allow(dead_code)]

use std::f64::consts::PI;

use dimo_core::mri::{make_cartesian_mask, CoilMaps, ForwardModel, KSpace, SamplingMask};
use dimo_core::vfa::{AcquisitionProtocol, MultiFlipAcquisition, ParamMaps};
use ndarray::{Array2, Array3};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_complex2(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Array2<Complex64> {
    Array2::from_shape_simple_fn((h, w), || Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
}

pub fn random_complex3(n: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Array3<Complex64> {
    Array3::from_shape_simple_fn((n, h, w), || Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
}

/// Random maps normalized so the coil energy is one at every pixel.
pub fn sos_maps(j: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> CoilMaps {
    let mut maps = random_complex3(j, h, w, rng);
    for p in 0..h {
        for q in 0..w {
            let e: f64 = (0..j).map(|c| maps[[c, p, q]].norm_sqr()).sum::<f64>().sqrt();
            for c in 0..j {
                maps[[c, p, q]] /= e;
            }
        }
    }
    CoilMaps::new(maps).unwrap()
}

/// Random maps without normalization.
pub fn raw_maps(j: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> CoilMaps {
    CoilMaps::new(random_complex3(j, h, w, rng)).unwrap()
}

pub fn random_mask(h: usize, w: usize, rng: &mut ChaCha8Rng) -> SamplingMask {
    let mut m = Array2::from_shape_simple_fn((h, w), || rng.random_bool(0.5));
    m[[h / 2, w / 2]] = true;
    let frac = m.iter().filter(|v| **v).count() as f64 / (h * w) as f64;
    SamplingMask::new(m, 1.0 / frac, dimo_core::mri::CenterRegion::None).unwrap()
}

pub fn masked(k: Array3<Complex64>, mask: &SamplingMask) -> KSpace {
    let mut k = k;
    for mut plane in k.outer_iter_mut() {
        plane.zip_mut_with(mask.mask(), |v, &m| {
            if !m {
                *v = Complex64::new(0.0, 0.0);
            }
        });
    }
    KSpace::new(k).unwrap()
}

/// Centered unitary DFT kernel `exp(-2 pi i (k - n/2)(p - n/2) / n) / sqrt(n)`.
pub fn dft_entry(k: usize, p: usize, n: usize) -> Complex64 {
    let kc = k as f64 - (n / 2) as f64;
    let pc = p as f64 - (n / 2) as f64;
    Complex64::from_polar(1.0 / (n as f64).sqrt(), -2.0 * PI * kc * pc / n as f64)
}

/// Direct O(N^2) centered 2D DFT.
pub fn direct_dft2(x: &Array2<Complex64>) -> Array2<Complex64> {
    let (h, w) = x.dim();
    Array2::from_shape_fn((h, w), |(k, l)| {
        let mut acc = Complex64::new(0.0, 0.0);
        for p in 0..h {
            for q in 0..w {
                acc += dft_entry(k, p, h) * dft_entry(l, q, w) * x[[p, q]];
            }
        }
        acc
    })
}

/// Dense encoding matrix with rows `(coil, k, l)` and columns `(p, q)`,
/// unsampled rows left at zero.
pub fn encoding_matrix(model: &ForwardModel) -> Array2<Complex64> {
    let (j, h, w) = model.kspace_dim();
    let maps = model.coil_maps().maps();
    let mask = model.mask().mask();
    Array2::from_shape_fn((j * h * w, h * w), |(row, col)| {
        let (c, k, l) = (row / (h * w), (row / w) % h, row % w);
        let (p, q) = (col / w, col % w);
        if !mask[[k, l]] {
            return Complex64::new(0.0, 0.0);
        }
        dft_entry(k, p, h) * dft_entry(l, q, w) * maps[[c, p, q]]
    })
}

pub fn matvec(a: &Array2<Complex64>, x: &[Complex64]) -> Vec<Complex64> {
    a.outer_iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

pub fn inner(a: impl IntoIterator<Item = Complex64>, b: impl IntoIterator<Item = Complex64>) -> Complex64 {
    a.into_iter().zip(b).map(|(x, y)| x * y.conj()).sum()
}

pub fn max_abs_diff<'a>(a: impl IntoIterator<Item = &'a Complex64>, b: impl IntoIterator<Item = &'a Complex64>) -> f64 {
    a.into_iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// Brute-force SSIM over every `n x n` window with uniform weights.
pub fn brute_ssim(x: &Array2<f64>, y: &Array2<f64>, n: usize, k1: f64, k2: f64, range: f64) -> f64 {
    let (h, w) = x.dim();
    let c1 = (k1 * range).powi(2);
    let c2 = (k2 * range).powi(2);
    let count = (n * n) as f64;
    let mut total = 0.0;
    let mut windows = 0.0;
    for i in 0..=h - n {
        for j in 0..=w - n {
            let px: Vec<f64> = (0..n * n).map(|k| x[[i + k / n, j + k % n]]).collect();
            let py: Vec<f64> = (0..n * n).map(|k| y[[i + k / n, j + k % n]]).collect();
            let mx = px.iter().sum::<f64>() / count;
            let my = py.iter().sum::<f64>() / count;
            let vx = px.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / count;
            let vy = py.iter().map(|a| (a - my).powi(2)).sum::<f64>() / count;
            let cxy = px.iter().zip(&py).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / count;
            total += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            windows += 1.0;
        }
    }
    total / windows
}

pub fn closed_form_psnr(v: &Array2<f64>, r: &Array2<f64>) -> f64 {
    let mse = v.iter().zip(r).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / v.len() as f64;
    let peak = r.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    10.0 * (peak * peak / mse).log10()
}

pub fn closed_form_nmse(v: &Array2<f64>, r: &Array2<f64>) -> f64 {
    v.iter().zip(r).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / r.iter().map(|b| b * b).sum::<f64>()
}

pub const PROTOCOL_TR: f64 = 0.040;
pub const PROTOCOL_FLIPS_DEG: [f64; 4] = [5.0, 10.0, 20.0, 40.0];

pub fn four_angle_protocol() -> AcquisitionProtocol {
    AcquisitionProtocol::from_degrees(PROTOCOL_TR, &PROTOCOL_FLIPS_DEG).unwrap()
}

/// Random in-range parameter maps.
pub fn random_params(h: usize, w: usize, rng: &mut ChaCha8Rng) -> ParamMaps {
    let t1 = Array2::from_shape_simple_fn((h, w), || rng.random_range(0.3..2.5));
    let i0 = Array2::from_shape_simple_fn((h, w), || {
        Complex64::from_polar(rng.random_range(0.5..1.5), rng.random_range(-1.0..1.0))
    });
    ParamMaps::new(t1, i0).unwrap()
}

/// Per-angle Cartesian acquisitions of random parameter maps plus noise.
pub fn random_quant_acquisition(h: usize, w: usize, j: usize, rng: &mut ChaCha8Rng) -> MultiFlipAcquisition {
    let proto = four_angle_protocol();
    let maps = sos_maps(j, h, w, rng);
    let truth = random_params(h, w, rng);
    let imgs = dimo_core::vfa::vfa_forward(&truth, &proto).unwrap();
    let mut models = Vec::new();
    let mut kspace = Vec::new();
    for k in 0..proto.n_angles() {
        let mask = make_cartesian_mask(h, w, 2.0, 2, 100 + k as u64).unwrap();
        let model = ForwardModel::new(maps.clone(), mask).unwrap();
        let img = dimo_core::mri::ComplexImage::new(imgs.imgs().index_axis(ndarray::Axis(0), k).to_owned()).unwrap();
        let clean = dimo_core::mri::apply_forward(&model, &img).unwrap();
        let noisy =
            clean.data().mapv(|v| v + Complex64::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)));
        kspace.push(masked(noisy, model.mask()));
        models.push(model);
    }
    MultiFlipAcquisition::new(models, kspace).unwrap()
}

/// Overrides that shrink a desk preset to a seconds-long run.
pub fn tiny_overrides(work_dir: &std::path::Path) -> Vec<String> {
    [
        "phantom.height=16",
        "phantom.width=16",
        "phantom.n_coils=2",
        "phantom.n_train=2",
        "phantom.n_test=1",
        "mask.center=2",
        "schedule.steps=4",
        "network.base_width=4",
        "network.depth=1",
        "network.time_embed_dim=8",
        "training.epochs=2",
        "training.batch_size=2",
        "training.checkpoint_every=1",
        "evaluation.afs=[4.0]",
        "evaluation.uncertainty_counts=[2, 3]",
    ]
    .iter()
    .map(|s| s.to_string())
    .chain(std::iter::once(format!("work_dir='{}'", work_dir.display())))
    .collect()
}

pub fn tiny_config(preset: &str, work_dir: &std::path::Path) -> dimo_core::harness::ExperimentConfig {
    dimo_core::harness::ExperimentConfig::preset(preset).unwrap().with_overrides(&tiny_overrides(work_dir)).unwrap()
}
