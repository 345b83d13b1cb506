use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Zip};
use num_complex::Complex64;

use crate::error::{DimoError, Result};
use crate::mri::fft::{fft2c, ifft2c};
use crate::mri::types::{CoilMaps, ComplexImage, ForwardModel, KSpace, SamplingMask};

fn check_image(model: &ForwardModel, dim: (usize, usize)) -> Result<()> {
    if model.image_dim() != dim {
        return Err(DimoError::Shape(format!("image {:?} does not match operator {:?}", dim, model.image_dim())));
    }
    Ok(())
}

fn check_kspace(model: &ForwardModel, dim: (usize, usize, usize)) -> Result<()> {
    if model.kspace_dim() != dim {
        return Err(DimoError::Shape(format!("k-space {:?} does not match operator {:?}", dim, model.kspace_dim())));
    }
    Ok(())
}

fn apply_mask(k: &mut Array2<Complex64>, mask: &SamplingMask) {
    Zip::from(k).and(mask.mask()).for_each(|v, &m| {
        if !m {
            *v = Complex64::new(0.0, 0.0);
        }
    });
}

/// `F S x` on all coils, no undersampling.
pub fn coil_expand(maps: &CoilMaps, img: &ArrayView2<Complex64>) -> Result<Array3<Complex64>> {
    let (j, h, w) = maps.maps().dim();
    if img.dim() != (h, w) {
        return Err(DimoError::Shape(format!("image {:?} vs coil maps {:?}", img.dim(), (h, w))));
    }
    let mut out = Array3::zeros((j, h, w));
    for (mut dst, s) in out.outer_iter_mut().zip(maps.maps().outer_iter()) {
        let weighted = &s * img;
        dst.assign(&fft2c(&weighted.view())?);
    }
    Ok(out)
}

/// `S^H F^-1 k`: inverse transform each coil and merge with conjugate maps.
pub fn coil_combine_adjoint(maps: &CoilMaps, k: &ArrayView3<Complex64>) -> Result<Array2<Complex64>> {
    let (j, h, w) = maps.maps().dim();
    if k.dim() != (j, h, w) {
        return Err(DimoError::Shape(format!("k-space {:?} vs coil maps {:?}", k.dim(), (j, h, w))));
    }
    let mut acc = Array2::zeros((h, w));
    for (kc, s) in k.outer_iter().zip(maps.maps().outer_iter()) {
        let img = ifft2c(&kc)?;
        Zip::from(&mut acc).and(&img).and(&s).for_each(|a, x, s| *a += s.conj() * x);
    }
    Ok(acc)
}

/// `A x = P F S x`.
pub fn apply_forward(model: &ForwardModel, img: &ComplexImage) -> Result<KSpace> {
    check_image(model, img.dim())?;
    let mut k = coil_expand(model.coil_maps(), &img.view())?;
    for mut kc in k.outer_iter_mut() {
        let mut owned = kc.to_owned();
        apply_mask(&mut owned, model.mask());
        kc.assign(&owned);
    }
    KSpace::new(k)
}

/// `A^H k = sum_j conj(S_j) F^-1 (P k_j)`.
pub fn apply_adjoint(model: &ForwardModel, k: &KSpace) -> Result<ComplexImage> {
    check_kspace(model, k.dim())?;
    let mut masked = k.data().clone();
    for mut kc in masked.outer_iter_mut() {
        Zip::from(&mut kc).and(model.mask().mask()).for_each(|v, &m| {
            if !m {
                *v = Complex64::new(0.0, 0.0);
            }
        });
    }
    ComplexImage::new(coil_combine_adjoint(model.coil_maps(), &masked.view())?)
}

/// Blend measured samples into the current estimate on sampled bins:
/// `P(lam f + (1 - lam) fhat) + (1 - P) fhat`.
pub fn data_consistency(fhat: &KSpace, f: &KSpace, mask: &SamplingMask, lam: f64) -> Result<KSpace> {
    let mut out = fhat.clone();
    data_consistency_in_place(out.data_mut(), f.data(), mask, lam)?;
    Ok(out)
}

pub(crate) fn data_consistency_in_place(
    fhat: &mut Array3<Complex64>,
    f: &Array3<Complex64>,
    mask: &SamplingMask,
    lam: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&lam) {
        return Err(DimoError::InvalidArgument(format!("DC weight {lam} outside [0, 1]")));
    }
    if fhat.dim() != f.dim() {
        return Err(DimoError::Shape(format!("estimate {:?} vs measured {:?}", fhat.dim(), f.dim())));
    }
    let (_, h, w) = fhat.dim();
    if mask.dim() != (h, w) {
        return Err(DimoError::Shape(format!("mask {:?} vs k-space {:?}", mask.dim(), (h, w))));
    }
    for (mut est, meas) in fhat.outer_iter_mut().zip(f.outer_iter()) {
        Zip::from(&mut est).and(&meas).and(mask.mask()).for_each(|e, m, &sampled| {
            if sampled {
                *e = *m * lam + *e * (1.0 - lam);
            }
        });
    }
    Ok(())
}

/// Gradient with respect to `fhat` of `1/2 ||A S^H F^-1 fhat - f||^2`.
///
/// The coil k-space is first merged into one image with the adjoint coil
/// combination, so the gradient is `F S A^H (A S^H F^-1 fhat - f)` per coil.
/// With a single unit coil and a full mask this reduces to `fhat - f`.
pub fn kspace_fidelity_grad(model: &ForwardModel, fhat: &KSpace, f: &KSpace) -> Result<KSpace> {
    check_kspace(model, fhat.dim())?;
    check_kspace(model, f.dim())?;
    let img = ComplexImage::new(coil_combine_adjoint(model.coil_maps(), &fhat.data().view())?)?;
    let mut residual = apply_forward(model, &img)?.into_inner();
    residual -= f.data();
    let back = apply_adjoint(model, &KSpace::new(residual)?)?;
    KSpace::new(coil_expand(model.coil_maps(), &back.view())?)
}

/// Scalar data-fidelity loss `1/2 ||A S^H F^-1 fhat - f||^2`.
pub fn kspace_fidelity_loss(model: &ForwardModel, fhat: &KSpace, f: &KSpace) -> Result<f64> {
    check_kspace(model, fhat.dim())?;
    let img = ComplexImage::new(coil_combine_adjoint(model.coil_maps(), &fhat.data().view())?)?;
    let pred = apply_forward(model, &img)?;
    Ok(0.5 * (pred.data() - f.data()).iter().map(|v| v.norm_sqr()).sum::<f64>())
}

/// Normal operator `F S A^H A S^H F^-1` of the k-space fidelity, without the
/// data term. Self-adjoint, so it is also its own backward map.
pub(crate) fn kspace_normal(model: &ForwardModel, fhat: &ArrayView3<Complex64>) -> Result<Array3<Complex64>> {
    let img = ComplexImage::new(coil_combine_adjoint(model.coil_maps(), fhat)?)?;
    let fwd = apply_forward(model, &img)?;
    let back = apply_adjoint(model, &fwd)?;
    coil_expand(model.coil_maps(), &back.view())
}

/// Image-domain normal operator `A^H A x`.
pub(crate) fn image_normal(model: &ForwardModel, img: &ArrayView2<Complex64>) -> Result<Array2<Complex64>> {
    check_image(model, img.dim())?;
    let mut k = coil_expand(model.coil_maps(), img)?;
    for mut kc in k.outer_iter_mut() {
        Zip::from(&mut kc).and(model.mask().mask()).for_each(|v, &m| {
            if !m {
                *v = Complex64::new(0.0, 0.0);
            }
        });
    }
    coil_combine_adjoint(model.coil_maps(), &k.view())
}

/// `F S A^H f`, the constant part of the k-space fidelity gradient.
pub(crate) fn kspace_rhs(model: &ForwardModel, f: &KSpace) -> Result<Array3<Complex64>> {
    let back = apply_adjoint(model, f)?;
    coil_expand(model.coil_maps(), &back.view())
}

/// SENSE coil combination `sum_j conj(S_j) x_j / sum_j |S_j|^2` of per-coil
/// images. Pixels with zero coil energy come out as 0.
pub fn sense_combine(maps: &CoilMaps, coil_imgs: &ArrayView3<Complex64>) -> Result<Array2<Complex64>> {
    let (j, h, w) = maps.maps().dim();
    if coil_imgs.dim() != (j, h, w) {
        return Err(DimoError::Shape(format!("coil images {:?} vs maps {:?}", coil_imgs.dim(), (j, h, w))));
    }
    let energy = maps.energy();
    let mut acc = Array2::<Complex64>::zeros((h, w));
    for (x, s) in coil_imgs.outer_iter().zip(maps.maps().outer_iter()) {
        Zip::from(&mut acc).and(&x).and(&s).for_each(|a, x, s| *a += s.conj() * x);
    }
    Zip::from(&mut acc).and(&energy).for_each(|a, &e| {
        *a = if e > 0.0 { *a / e } else { Complex64::new(0.0, 0.0) };
    });
    Ok(acc)
}

/// Per-coil inverse transform followed by SENSE combination.
pub fn reconstruct_image(fhat0: &KSpace, maps: &CoilMaps) -> Result<ComplexImage> {
    let (j, h, w) = fhat0.dim();
    if maps.maps().dim() != (j, h, w) {
        return Err(DimoError::Shape(format!("k-space {:?} vs maps {:?}", (j, h, w), maps.maps().dim())));
    }
    let mut coil_imgs = Array3::zeros((j, h, w));
    for (mut dst, k) in coil_imgs.outer_iter_mut().zip(fhat0.data().outer_iter()) {
        dst.assign(&ifft2c(&k)?);
    }
    ComplexImage::new(sense_combine(maps, &coil_imgs.view())?)
}
