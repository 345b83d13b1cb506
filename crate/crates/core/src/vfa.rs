//! Variable-flip-angle spoiled gradient-echo signal model.
//!
//! `M_i = I0 (1 - E1) sin(phi_i) / (1 - E1 cos(phi_i))` with
//! `E1 = exp(-TR / T1)`. The fit inverts it with the DESPOT1 linearization
//! `|M_i| / sin(phi_i) = E1 |M_i| / tan(phi_i) + |I0| (1 - E1)`.

use ndarray::{Array2, Array3, ArrayView3, Axis, Zip};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{DimoError, Result};
use crate::mri::{apply_adjoint, apply_forward, image_normal, ComplexImage, ForwardModel, KSpace};

/// Sequence timing and flip angles.
#[derive(Debug, Clone, PartialEq)]
pub struct AcquisitionProtocol {
    tr: f64,
    flip_angles: Vec<f64>,
    echo_time: Option<f64>,
    b1_scale: Option<Array2<f64>>,
}

impl AcquisitionProtocol {
    /// `flip_angles` in radians.
    pub fn new(tr: f64, flip_angles: Vec<f64>) -> Result<Self> {
        if !(tr > 0.0 && tr.is_finite()) {
            return Err(DimoError::InvalidArgument(format!("TR must be positive, got {tr}")));
        }
        if flip_angles.len() < 2 {
            return Err(DimoError::InvalidArgument("need at least two flip angles".into()));
        }
        if flip_angles.iter().any(|a| !(*a > 0.0 && *a < std::f64::consts::FRAC_PI_2)) {
            return Err(DimoError::InvalidArgument("flip angles must lie in (0, pi/2)".into()));
        }
        Ok(Self { tr, flip_angles, echo_time: None, b1_scale: None })
    }

    pub fn from_degrees(tr: f64, degrees: &[f64]) -> Result<Self> {
        Self::new(tr, degrees.iter().map(|d| d.to_radians()).collect())
    }

    /// Echo time is recorded for completeness; the model has no T2* term.
    pub fn with_echo_time(mut self, te: f64) -> Self {
        self.echo_time = Some(te);
        self
    }

    pub fn with_b1_scale(mut self, b1: Array2<f64>) -> Result<Self> {
        if b1.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(DimoError::InvalidArgument("B1 scale must be positive".into()));
        }
        self.b1_scale = Some(b1);
        Ok(self)
    }

    pub fn tr(&self) -> f64 {
        self.tr
    }

    pub fn flip_angles(&self) -> &[f64] {
        &self.flip_angles
    }

    pub fn n_angles(&self) -> usize {
        self.flip_angles.len()
    }

    pub fn echo_time(&self) -> Option<f64> {
        self.echo_time
    }

    pub fn b1_scale(&self) -> Option<&Array2<f64>> {
        self.b1_scale.as_ref()
    }

    fn check_grid(&self, dim: (usize, usize)) -> Result<()> {
        match &self.b1_scale {
            Some(b1) if b1.dim() != dim => Err(DimoError::Shape(format!("B1 map {:?} vs image {:?}", b1.dim(), dim))),
            _ => Ok(()),
        }
    }

    /// Effective flip angle of angle `k` at pixel `(i, j)`.
    pub fn effective_angle(&self, k: usize, i: usize, j: usize) -> f64 {
        let scale = self.b1_scale.as_ref().map_or(1.0, |b| b[[i, j]]);
        self.flip_angles[k] * scale
    }
}

/// Tissue parameters: T1 in seconds and complex proton density.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamMaps {
    t1: Array2<f64>,
    i0: Array2<Complex64>,
}

impl ParamMaps {
    pub fn new(t1: Array2<f64>, i0: Array2<Complex64>) -> Result<Self> {
        if t1.dim() != i0.dim() {
            return Err(DimoError::Shape(format!("T1 {:?} vs I0 {:?}", t1.dim(), i0.dim())));
        }
        if t1.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(DimoError::InvalidArgument("T1 must be positive and finite".into()));
        }
        if i0.iter().any(|v| !(v.re.is_finite() && v.im.is_finite())) {
            return Err(DimoError::InvalidArgument("I0 must be finite".into()));
        }
        Ok(Self { t1, i0 })
    }

    pub fn t1(&self) -> &Array2<f64> {
        &self.t1
    }

    pub fn i0(&self) -> &Array2<Complex64> {
        &self.i0
    }

    pub fn dim(&self) -> (usize, usize) {
        self.t1.dim()
    }

    pub fn into_parts(self) -> (Array2<f64>, Array2<Complex64>) {
        (self.t1, self.i0)
    }
}

/// One complex image per flip angle, shape (M, H, W).
#[derive(Debug, Clone, PartialEq)]
pub struct MultiFlipImages {
    imgs: Array3<Complex64>,
}

impl MultiFlipImages {
    pub fn new(imgs: Array3<Complex64>) -> Result<Self> {
        if imgs.iter().any(|v| !(v.re.is_finite() && v.im.is_finite())) {
            return Err(DimoError::InvalidArgument("images must be finite".into()));
        }
        Ok(Self { imgs })
    }

    pub fn imgs(&self) -> &Array3<Complex64> {
        &self.imgs
    }

    pub fn into_inner(self) -> Array3<Complex64> {
        self.imgs
    }

    pub fn n_angles(&self) -> usize {
        self.imgs.dim().0
    }
}

/// Real signal factor `(1 - E1) sin(a) / (1 - E1 cos(a))`.
pub fn signal_factor(t1: f64, flip: f64, tr: f64) -> f64 {
    let e1 = (-tr / t1).exp();
    (1.0 - e1) * flip.sin() / (1.0 - e1 * flip.cos())
}

/// Derivative of [`signal_factor`] with respect to T1.
pub fn signal_factor_dt1(t1: f64, flip: f64, tr: f64) -> f64 {
    let e1 = (-tr / t1).exp();
    let c = flip.cos();
    let d_e1 = e1 * tr / (t1 * t1);
    flip.sin() * (c - 1.0) / (1.0 - e1 * c).powi(2) * d_e1
}

pub fn vfa_forward(params: &ParamMaps, proto: &AcquisitionProtocol) -> Result<MultiFlipImages> {
    let (h, w) = params.dim();
    proto.check_grid((h, w))?;
    let m = proto.n_angles();
    let imgs = Array3::from_shape_fn((m, h, w), |(k, i, j)| {
        params.i0[[i, j]] * signal_factor(params.t1[[i, j]], proto.effective_angle(k, i, j), proto.tr)
    });
    MultiFlipImages::new(imgs)
}

/// Clamping and degeneracy thresholds for [`vfa_fit`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitSettings {
    pub t1_floor: f64,
    pub t1_ceil: f64,
    pub signal_floor: f64,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self { t1_floor: 0.05, t1_ceil: 10.0, signal_floor: 0.0 }
    }
}

impl FitSettings {
    /// Signal floor at `1e-6` of the given reference magnitude.
    pub fn relative_to(reference: f64) -> Self {
        Self { signal_floor: 1e-6 * reference, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VfaFit {
    pub params: ParamMaps,
    pub valid: Array2<bool>,
}

/// Pixel-wise DESPOT1 fit.
pub fn vfa_fit(imgs: &MultiFlipImages, proto: &AcquisitionProtocol, settings: &FitSettings) -> Result<VfaFit> {
    let (m, h, w) = imgs.imgs.dim();
    if m != proto.n_angles() {
        return Err(DimoError::Shape(format!("{m} images for {} flip angles", proto.n_angles())));
    }
    proto.check_grid((h, w))?;
    let mut t1 = Array2::from_elem((h, w), settings.t1_floor);
    let mut i0 = Array2::zeros((h, w));
    let mut valid = Array2::from_elem((h, w), false);
    let mut xs = vec![0.0; m];
    let mut ys = vec![0.0; m];
    for i in 0..h {
        for j in 0..w {
            let mut brightest = 0;
            let mut any_signal = false;
            for k in 0..m {
                let v = imgs.imgs[[k, i, j]];
                let a = v.norm();
                let phi = proto.effective_angle(k, i, j);
                xs[k] = a / phi.tan();
                ys[k] = a / phi.sin();
                any_signal |= a >= settings.signal_floor && a > 0.0;
                if a > imgs.imgs[[brightest, i, j]].norm() {
                    brightest = k;
                }
            }
            if !any_signal {
                continue;
            }
            let mx = xs.iter().sum::<f64>() / m as f64;
            let my = ys.iter().sum::<f64>() / m as f64;
            let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
            let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
            if !(sxx > 0.0) {
                continue;
            }
            let e1 = sxy / sxx;
            if !(e1 > 0.0 && e1 < 1.0) {
                continue;
            }
            let t1_px = (-proto.tr / e1.ln()).clamp(settings.t1_floor, settings.t1_ceil);
            let e1c = (-proto.tr / t1_px).exp();
            let mag = (my - e1c * mx) / (1.0 - e1c);
            let phase = imgs.imgs[[brightest, i, j]].arg();
            t1[[i, j]] = t1_px;
            i0[[i, j]] = Complex64::from_polar(mag.max(0.0), phase);
            valid[[i, j]] = true;
        }
    }
    Ok(VfaFit { params: ParamMaps::new(t1, i0)?, valid })
}

/// Per-angle encoding operators and measurements.
#[derive(Debug, Clone)]
pub struct MultiFlipAcquisition {
    models: Vec<ForwardModel>,
    kspace: Vec<KSpace>,
    adjoint_data: Array3<Complex64>,
}

impl MultiFlipAcquisition {
    pub fn new(models: Vec<ForwardModel>, kspace: Vec<KSpace>) -> Result<Self> {
        if models.len() != kspace.len() || models.is_empty() {
            return Err(DimoError::Shape(format!("{} models for {} measurements", models.len(), kspace.len())));
        }
        let (h, w) = models[0].image_dim();
        let mut adjoint_data = Array3::zeros((models.len(), h, w));
        for (k, (m, f)) in models.iter().zip(&kspace).enumerate() {
            if m.image_dim() != (h, w) {
                return Err(DimoError::Shape("per-angle operators disagree on image size".into()));
            }
            adjoint_data.index_axis_mut(Axis(0), k).assign(apply_adjoint(m, f)?.data());
        }
        Ok(Self { models, kspace, adjoint_data })
    }

    pub fn models(&self) -> &[ForwardModel] {
        &self.models
    }

    pub fn kspace(&self) -> &[KSpace] {
        &self.kspace
    }

    /// `A_i^H f_i` stacked over angles.
    pub fn adjoint_data(&self) -> &Array3<Complex64> {
        &self.adjoint_data
    }

    pub fn n_angles(&self) -> usize {
        self.models.len()
    }

    pub fn image_dim(&self) -> (usize, usize) {
        self.models[0].image_dim()
    }

    /// Per-angle `A_i^H A_i x_i`.
    pub fn normal(&self, imgs: &ArrayView3<Complex64>) -> Result<Array3<Complex64>> {
        let (m, h, w) = imgs.dim();
        if m != self.n_angles() {
            return Err(DimoError::Shape(format!("{m} images for {} acquisitions", self.n_angles())));
        }
        let mut out = Array3::zeros((m, h, w));
        for (k, model) in self.models.iter().enumerate() {
            out.index_axis_mut(Axis(0), k).assign(&image_normal(model, &imgs.index_axis(Axis(0), k))?);
        }
        Ok(out)
    }

    /// Per-angle residual images `A_i^H (A_i m_i - f_i)`.
    pub fn residual_images(&self, imgs: &MultiFlipImages) -> Result<Array3<Complex64>> {
        Ok(self.normal(&imgs.imgs.view())? - &self.adjoint_data)
    }

    /// `1/2 sum_i ||A_i M_i(params) - f_i||^2`.
    pub fn fidelity_loss(&self, params: &ParamMaps, proto: &AcquisitionProtocol) -> Result<f64> {
        let imgs = vfa_forward(params, proto)?;
        let mut total = 0.0;
        for (k, (model, f)) in self.models.iter().zip(&self.kspace).enumerate() {
            let img = ComplexImage::new(imgs.imgs.index_axis(Axis(0), k).to_owned())?;
            let pred = apply_forward(model, &img)?;
            total += (pred.data() - f.data()).iter().map(|v| v.norm_sqr()).sum::<f64>();
        }
        Ok(0.5 * total)
    }
}

/// Gradient of the summed per-angle fidelity with respect to T1 and I0.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient {
    pub t1: Array2<f64>,
    /// `dL/dRe(I0) + i dL/dIm(I0)`.
    pub i0: Array2<Complex64>,
}

pub fn vfa_fidelity_grad(
    params: &ParamMaps,
    acq: &MultiFlipAcquisition,
    proto: &AcquisitionProtocol,
) -> Result<ParamGradient> {
    let imgs = vfa_forward(params, proto)?;
    let resid = acq.residual_images(&imgs)?;
    let (h, w) = params.dim();
    let mut g_t1 = Array2::zeros((h, w));
    let mut g_i0 = Array2::zeros((h, w));
    for (k, r) in resid.outer_iter().enumerate() {
        Zip::indexed(&mut g_t1).and(&mut g_i0).and(&r).for_each(|(i, j), gt, gi, rv| {
            let phi = proto.effective_angle(k, i, j);
            let t1 = params.t1[[i, j]];
            let i0 = params.i0[[i, j]];
            *gt += (rv.conj() * i0).re * signal_factor_dt1(t1, phi, proto.tr);
            *gi += rv * signal_factor(t1, phi, proto.tr);
        });
    }
    Ok(ParamGradient { t1: g_t1, i0: g_i0 })
}
