//! Centered, unitary 2D discrete Fourier transforms.
//!
//! The zero frequency sits at `(h/2, w/2)` in both the image and k-space
//! layouts, and both directions carry a `1/sqrt(h*w)` factor so that the
//! forward and inverse transforms are exact adjoints of each other.

use std::cell::RefCell;

use ndarray::{Array2, ArrayView2, Axis};
use num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};

use crate::error::{DimoError, Result};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

pub(crate) fn check_even_dims(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(2) || !w.is_multiple_of(2) {
        return Err(DimoError::Shape(format!("centered FFT needs even, nonzero dimensions, got {h}x{w}")));
    }
    Ok(())
}

/// Circular shift by half the grid in both axes. For even sizes this is its
/// own inverse, so it serves as both `fftshift` and `ifftshift`.
fn half_shift(x: &ArrayView2<Complex64>) -> Array2<Complex64> {
    let (h, w) = x.dim();
    let mut out = Array2::zeros((h, w));
    for ((i, j), v) in x.indexed_iter() {
        out[[(i + h / 2) % h, (j + w / 2) % w]] = *v;
    }
    out
}

fn transform(x: &ArrayView2<Complex64>, direction: FftDirection) -> Result<Array2<Complex64>> {
    let (h, w) = x.dim();
    check_even_dims(h, w)?;
    let mut data = half_shift(x);
    let (row_fft, col_fft) = PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        (p.plan_fft(w, direction), p.plan_fft(h, direction))
    });

    // rows are contiguous in the standard layout
    {
        let buf = data.as_slice_mut().expect("freshly allocated arrays are contiguous");
        row_fft.process(buf);
    }
    let mut cols = data.t().as_standard_layout().into_owned();
    col_fft.process(cols.as_slice_mut().expect("standard layout"));
    let scale = 1.0 / ((h * w) as f64).sqrt();
    for (mut dst, src) in data.axis_iter_mut(Axis(1)).zip(cols.outer_iter()) {
        dst.zip_mut_with(&src, |d, s| *d = *s * scale);
    }
    Ok(half_shift(&data.view()))
}

/// Forward centered unitary 2D DFT.
pub fn fft2c(x: &ArrayView2<Complex64>) -> Result<Array2<Complex64>> {
    transform(x, FftDirection::Forward)
}

/// Inverse centered unitary 2D DFT.
pub fn ifft2c(x: &ArrayView2<Complex64>) -> Result<Array2<Complex64>> {
    transform(x, FftDirection::Inverse)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_grid(h: usize, w: usize, seed: u64) -> Array2<Complex64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((h, w), |_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
    }

    /// Direct O(N^2) centered DFT used as an independent reference.
    fn direct_dft2c(x: &Array2<Complex64>) -> Array2<Complex64> {
        let (h, w) = x.dim();
        let (ch, cw) = ((h / 2) as f64, (w / 2) as f64);
        let norm = 1.0 / ((h * w) as f64).sqrt();
        Array2::from_shape_fn((h, w), |(ku, kv)| {
            let mut acc = Complex64::new(0.0, 0.0);
            for ((m, n), v) in x.indexed_iter() {
                let phase = -2.0
                    * PI
                    * ((ku as f64 - ch) * (m as f64 - ch) / h as f64 + (kv as f64 - cw) * (n as f64 - cw) / w as f64);
                acc += v * Complex64::from_polar(1.0, phase);
            }
            acc * norm
        })
    }

    #[test]
    fn constant_image_maps_to_center_bin() {
        let c = Complex64::new(2.5, -0.5);
        let x = Array2::from_elem((8, 12), c);
        let k = fft2c(&x.view()).unwrap();
        let expected = c * (96f64).sqrt();
        for ((i, j), v) in k.indexed_iter() {
            if (i, j) == (4, 6) {
                assert!((v - expected).norm() < 1e-12);
            } else {
                assert!(v.norm() < 1e-12, "bin ({i},{j}) = {v}");
            }
        }
    }

    #[test]
    fn round_trip_is_identity() {
        let x = random_grid(16, 10, 3);
        let back = ifft2c(&fft2c(&x.view()).unwrap().view()).unwrap();
        let err = (&back - &x).iter().map(|v| v.norm()).fold(0.0, f64::max);
        assert!(err < 1e-10, "round-trip error {err}");
    }

    #[test]
    fn matches_direct_dft_and_preserves_norm() {
        let x = random_grid(8, 8, 11);
        let fast = fft2c(&x.view()).unwrap();
        let slow = direct_dft2c(&x);
        let err = (&fast - &slow).iter().map(|v| v.norm()).fold(0.0, f64::max);
        assert!(err < 1e-10, "fft vs direct DFT {err}");
        let norm = |a: &Array2<Complex64>| a.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        assert!((norm(&slow) - norm(&x)).abs() < 1e-10);
        assert!((norm(&fast) - norm(&x)).abs() < 1e-10);
    }

    #[test]
    fn odd_dimensions_are_rejected() {
        let x = Array2::<Complex64>::zeros((9, 8));
        assert!(matches!(fft2c(&x.view()), Err(DimoError::Shape(_))));
        assert!(ifft2c(&x.t()).is_err());
    }
}
