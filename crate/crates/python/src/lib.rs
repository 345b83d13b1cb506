//! Python bindings: operators, schedules, the vFA model, metrics and the
//! experiment pipeline. Arrays cross the boundary as nested lists.

use std::path::PathBuf;

use ndarray::{Array2, Array3};
use num_complex::Complex64;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use dimo_core::harness::{self, ExperimentConfig as CoreConfig, MaskSpec};
use dimo_core::metrics::{self, SsimParams};
use dimo_core::mri::{self, CoilMaps, ComplexImage, ForwardModel, KSpace, SamplingMask};
use dimo_core::schedule;
use dimo_core::vfa::{self, AcquisitionProtocol, FitSettings, MultiFlipImages, ParamMaps};
use dimo_core::DimoError;

fn py_err(e: DimoError) -> PyErr {
    match e {
        DimoError::Config(_) | DimoError::InvalidArgument(_) | DimoError::Shape(_) | DimoError::Mask(_) => {
            PyValueError::new_err(e.to_string())
        }
        DimoError::StepOutOfRange { .. } => PyValueError::new_err(e.to_string()),
        DimoError::Data(_) | DimoError::Io(_) | DimoError::Json(_) => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_array2<T: Clone>(rows: Vec<Vec<T>>) -> PyResult<Array2<T>> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("rows must have equal length"));
    }
    Array2::from_shape_vec((h, w), rows.into_iter().flatten().collect())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_array3<T: Clone>(planes: Vec<Vec<Vec<T>>>) -> PyResult<Array3<T>> {
    let n = planes.len();
    let arrays = planes.into_iter().map(to_array2).collect::<PyResult<Vec<_>>>()?;
    let (h, w) = arrays.first().map_or((0, 0), |a| a.dim());
    if arrays.iter().any(|a| a.dim() != (h, w)) {
        return Err(PyValueError::new_err("planes must have equal shape"));
    }
    Array3::from_shape_vec((n, h, w), arrays.into_iter().flat_map(|a| a.into_iter()).collect())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

fn from_array2<T: Clone>(a: &Array2<T>) -> Vec<Vec<T>> {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

fn from_array3<T: Clone>(a: &Array3<T>) -> Vec<Vec<Vec<T>>> {
    a.outer_iter().map(|p| p.outer_iter().map(|r| r.to_vec()).collect()).collect()
}

fn sampling_mask(mask: Vec<Vec<bool>>) -> PyResult<SamplingMask> {
    let m = to_array2(mask)?;
    let frac = m.iter().filter(|v| **v).count() as f64 / m.len().max(1) as f64;
    if frac == 0.0 {
        return Err(PyValueError::new_err("mask samples nothing"));
    }
    SamplingMask::new(m, 1.0 / frac, mri::CenterRegion::None).map_err(py_err)
}

fn forward_model(coil_maps: Vec<Vec<Vec<Complex64>>>, mask: Vec<Vec<bool>>) -> PyResult<ForwardModel> {
    let maps = CoilMaps::new(to_array3(coil_maps)?).map_err(py_err)?;
    ForwardModel::new(maps, sampling_mask(mask)?).map_err(py_err)
}

/// DDPM noise schedule with linear betas.
#[pyclass(name = "NoiseSchedule", frozen)]
struct PyNoiseSchedule {
    inner: schedule::NoiseSchedule,
}

#[pymethods]
impl PyNoiseSchedule {
    #[new]
    fn new(steps: usize, beta_start: f64, beta_end: f64) -> PyResult<Self> {
        Ok(Self { inner: schedule::NoiseSchedule::linear(steps, beta_start, beta_end).map_err(py_err)? })
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps()
    }

    fn beta(&self, t: usize) -> PyResult<f64> {
        self.inner.check_step(t).map_err(py_err)?;
        Ok(self.inner.beta(t))
    }

    fn alpha_bar(&self, t: usize) -> PyResult<f64> {
        if t > self.inner.steps() {
            return Err(PyValueError::new_err(format!("step {t} beyond {}", self.inner.steps())));
        }
        Ok(self.inner.alpha_bar(t))
    }

    fn sigma(&self, t: usize) -> PyResult<f64> {
        self.inner.check_step(t).map_err(py_err)?;
        Ok(self.inner.sigma(t))
    }
}

/// Data-consistency weight `lambda_t` of a `total`-step schedule.
#[pyfunction]
fn dc_lambda(t: usize, total: usize) -> PyResult<f64> {
    schedule::lambda_at(t, total).map_err(py_err)
}

#[pyfunction]
fn cartesian_mask(h: usize, w: usize, af: f64, center_lines: usize, seed: u64) -> PyResult<Vec<Vec<bool>>> {
    Ok(from_array2(mri::make_cartesian_mask(h, w, af, center_lines, seed).map_err(py_err)?.mask()))
}

#[pyfunction]
fn poisson_mask(h: usize, w: usize, af: f64, center_block: usize, seed: u64) -> PyResult<Vec<Vec<bool>>> {
    Ok(from_array2(mri::make_poisson_mask(h, w, af, center_block, seed).map_err(py_err)?.mask()))
}

/// Masked multi-coil k-space `P F S x`.
#[pyfunction]
fn forward(
    image: Vec<Vec<Complex64>>,
    coil_maps: Vec<Vec<Vec<Complex64>>>,
    mask: Vec<Vec<bool>>,
) -> PyResult<Vec<Vec<Vec<Complex64>>>> {
    let model = forward_model(coil_maps, mask)?;
    let img = ComplexImage::new(to_array2(image)?).map_err(py_err)?;
    Ok(from_array3(mri::apply_forward(&model, &img).map_err(py_err)?.data()))
}

/// Adjoint `S^H F^-1 P^T f`.
#[pyfunction]
fn adjoint(
    kspace: Vec<Vec<Vec<Complex64>>>,
    coil_maps: Vec<Vec<Vec<Complex64>>>,
    mask: Vec<Vec<bool>>,
) -> PyResult<Vec<Vec<Complex64>>> {
    let model = forward_model(coil_maps, mask)?;
    let k = KSpace::new(to_array3(kspace)?).map_err(py_err)?;
    Ok(from_array2(mri::apply_adjoint(&model, &k).map_err(py_err)?.data()))
}

/// `(1 - lam P) fhat + lam P f`.
#[pyfunction]
fn data_consistency(
    fhat: Vec<Vec<Vec<Complex64>>>,
    measured: Vec<Vec<Vec<Complex64>>>,
    mask: Vec<Vec<bool>>,
    lam: f64,
) -> PyResult<Vec<Vec<Vec<Complex64>>>> {
    let fhat = KSpace::new(to_array3(fhat)?).map_err(py_err)?;
    let f = KSpace::new(to_array3(measured)?).map_err(py_err)?;
    Ok(from_array3(mri::data_consistency(&fhat, &f, &sampling_mask(mask)?, lam).map_err(py_err)?.data()))
}

#[pyfunction]
fn signal_factor(t1: f64, flip_deg: f64, tr: f64) -> f64 {
    vfa::signal_factor(t1, flip_deg.to_radians(), tr)
}

/// Multi-flip images `(M, H, W)` from T1 and I0 maps.
#[pyfunction]
fn vfa_forward(
    t1: Vec<Vec<f64>>,
    i0: Vec<Vec<Complex64>>,
    tr: f64,
    flip_angles_deg: Vec<f64>,
) -> PyResult<Vec<Vec<Vec<Complex64>>>> {
    let proto = AcquisitionProtocol::from_degrees(tr, &flip_angles_deg).map_err(py_err)?;
    let params = ParamMaps::new(to_array2(t1)?, to_array2(i0)?).map_err(py_err)?;
    Ok(from_array3(vfa::vfa_forward(&params, &proto).map_err(py_err)?.imgs()))
}

/// Pixel-wise DESPOT1 fit returning `(t1, i0, valid)`.
#[pyfunction]
#[allow(clippy::type_complexity)]
fn vfa_fit(
    images: Vec<Vec<Vec<Complex64>>>,
    tr: f64,
    flip_angles_deg: Vec<f64>,
) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<Complex64>>, Vec<Vec<bool>>)> {
    let proto = AcquisitionProtocol::from_degrees(tr, &flip_angles_deg).map_err(py_err)?;
    let imgs = MultiFlipImages::new(to_array3(images)?).map_err(py_err)?;
    let fit = vfa::vfa_fit(&imgs, &proto, &FitSettings::default()).map_err(py_err)?;
    Ok((from_array2(fit.params.t1()), from_array2(fit.params.i0()), from_array2(&fit.valid)))
}

#[pyfunction]
fn psnr(v: Vec<Vec<f64>>, reference: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::psnr(&to_array2(v)?.view(), &to_array2(reference)?.view()).map_err(py_err)
}

#[pyfunction]
fn nmse(v: Vec<Vec<f64>>, reference: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::nmse(&to_array2(v)?.view(), &to_array2(reference)?.view()).map_err(py_err)
}

#[pyfunction]
fn ssim(v: Vec<Vec<f64>>, reference: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::ssim(&to_array2(v)?.view(), &to_array2(reference)?.view(), &SsimParams::default()).map_err(py_err)
}

/// Experiment configuration backed by TOML.
#[pyclass(name = "ExperimentConfig", skip_from_py_object)]
#[derive(Clone)]
struct PyExperimentConfig {
    inner: CoreConfig,
}

#[pymethods]
impl PyExperimentConfig {
    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        Ok(Self { inner: CoreConfig::preset(name).map_err(py_err)? })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self { inner: CoreConfig::from_toml_str(text).map_err(py_err)? })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml_string().map_err(py_err)
    }

    /// Copy with `key.path=value` overrides applied.
    fn with_overrides(&self, overrides: Vec<String>) -> PyResult<Self> {
        Ok(Self { inner: self.inner.with_overrides(&overrides).map_err(py_err)? })
    }

    #[getter]
    fn mode(&self) -> &'static str {
        self.inner.mode.as_str()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn work_dir(&self) -> PathBuf {
        self.inner.work_dir.clone()
    }
}

fn json<T: serde::Serialize>(value: &T) -> PyResult<String> {
    serde_json::to_string_pretty(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Writes a phantom dataset and returns its manifest as JSON.
#[pyfunction]
fn make_phantom(config: &PyExperimentConfig, out: PathBuf) -> PyResult<String> {
    json(harness::make_phantom(&config.inner, &out).map_err(py_err)?.manifest())
}

#[pyfunction]
#[pyo3(signature = (config, data, out, af=None))]
fn undersample(config: &PyExperimentConfig, data: PathBuf, out: PathBuf, af: Option<f64>) -> PyResult<String> {
    let cfg = &config.inner;
    let mask = MaskSpec { af: af.unwrap_or(cfg.mask.af), ..cfg.mask };
    json(harness::undersample(&data, &out, mask, cfg.seeds().mask).map_err(py_err)?.manifest())
}

#[pyfunction]
fn train(py: Python<'_>, config: &PyExperimentConfig, data: PathBuf, checkpoint: PathBuf) -> PyResult<String> {
    let cfg = config.inner.clone();
    let summary = py.detach(move || harness::train(&cfg, &data, &checkpoint)).map_err(py_err)?;
    json(&summary)
}

#[pyfunction]
fn sample(
    py: Python<'_>,
    config: &PyExperimentConfig,
    data: PathBuf,
    checkpoint: PathBuf,
    out: PathBuf,
) -> PyResult<String> {
    let cfg = config.inner.clone();
    let report = py.detach(move || harness::sample(&cfg, &data, &checkpoint, &out)).map_err(py_err)?;
    json(&report)
}

#[pyfunction]
fn evaluate(recon: PathBuf) -> PyResult<String> {
    json(&harness::evaluate(&recon).map_err(py_err)?)
}

#[pyfunction]
fn run_experiment(py: Python<'_>, config: &PyExperimentConfig) -> PyResult<String> {
    let cfg = config.inner.clone();
    let report = py.detach(move || harness::run_experiment(&cfg)).map_err(py_err)?;
    json(&report)
}

#[pymodule]
fn dimo(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyNoiseSchedule>()?;
    m.add_class::<PyExperimentConfig>()?;
    m.add_function(wrap_pyfunction!(dc_lambda, m)?)?;
    m.add_function(wrap_pyfunction!(cartesian_mask, m)?)?;
    m.add_function(wrap_pyfunction!(poisson_mask, m)?)?;
    m.add_function(wrap_pyfunction!(forward, m)?)?;
    m.add_function(wrap_pyfunction!(adjoint, m)?)?;
    m.add_function(wrap_pyfunction!(data_consistency, m)?)?;
    m.add_function(wrap_pyfunction!(signal_factor, m)?)?;
    m.add_function(wrap_pyfunction!(vfa_forward, m)?)?;
    m.add_function(wrap_pyfunction!(vfa_fit, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(nmse, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(make_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(undersample, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(sample, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
