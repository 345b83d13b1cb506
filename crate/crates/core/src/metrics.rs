//! Image quality metrics, ROI statistics and the repeated-sampling
//! uncertainty study.

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{DimoError, Result};

fn check_same(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(DimoError::Shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

fn max_abs(a: &ArrayView2<f64>) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// `20 log10(max|v_ref| / RMSE(v, v_ref))`; identical images give `+inf`.
pub fn psnr(v: &ArrayView2<f64>, v_ref: &ArrayView2<f64>) -> Result<f64> {
    check_same(v, v_ref)?;
    let peak = max_abs(v_ref);
    if peak == 0.0 {
        return Err(DimoError::InvalidArgument("PSNR reference is identically zero".into()));
    }
    let mse = Zip::from(v).and(v_ref).fold(0.0, |acc, a, b| acc + (a - b).powi(2)) / v.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (peak / mse.sqrt()).log10())
}

/// `||v_ref - v||^2 / ||v_ref||^2`.
pub fn nmse(v: &ArrayView2<f64>, v_ref: &ArrayView2<f64>) -> Result<f64> {
    check_same(v, v_ref)?;
    let denom: f64 = v_ref.iter().map(|x| x * x).sum();
    if denom == 0.0 {
        return Err(DimoError::InvalidArgument("NMSE reference is identically zero".into()));
    }
    Ok(Zip::from(v).and(v_ref).fold(0.0, |acc, a, b| acc + (a - b).powi(2)) / denom)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range `L`; `None` uses `max|v_ref|`.
    pub data_range: Option<f64>,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { window: 7, k1: 0.01, k2: 0.03, data_range: None }
    }
}

/// Summed-area table with a zero first row and column.
fn integral(a: &Array2<f64>) -> Array2<f64> {
    let (h, w) = a.dim();
    let mut s = Array2::zeros((h + 1, w + 1));
    for i in 0..h {
        for j in 0..w {
            s[[i + 1, j + 1]] = a[[i, j]] + s[[i, j + 1]] + s[[i + 1, j]] - s[[i, j]];
        }
    }
    s
}

fn box_sum(s: &Array2<f64>, i: usize, j: usize, n: usize) -> f64 {
    s[[i + n, j + n]] - s[[i, j + n]] - s[[i + n, j]] + s[[i, j]]
}

/// Mean local SSIM over all fully contained `window x window` patches, with
/// uniform weights and population statistics.
pub fn ssim(v: &ArrayView2<f64>, v_ref: &ArrayView2<f64>, params: &SsimParams) -> Result<f64> {
    check_same(v, v_ref)?;
    let n = params.window;
    if n == 0 || n.is_multiple_of(2) {
        return Err(DimoError::InvalidArgument(format!("SSIM window {n} must be odd")));
    }
    let (h, w) = v.dim();
    if h < n || w < n {
        return Err(DimoError::Shape(format!("image {h}x{w} smaller than SSIM window {n}")));
    }
    let range = params.data_range.unwrap_or_else(|| max_abs(v_ref));
    let c1 = (params.k1 * range).powi(2);
    let c2 = (params.k2 * range).powi(2);
    let x = v.to_owned();
    let y = v_ref.to_owned();
    let sx = integral(&x);
    let sy = integral(&y);
    let sxx = integral(&(&x * &x));
    let syy = integral(&(&y * &y));
    let sxy = integral(&(&x * &y));
    let count = (n * n) as f64;
    let mut total = 0.0;
    for i in 0..=h - n {
        for j in 0..=w - n {
            let mx = box_sum(&sx, i, j, n) / count;
            let my = box_sum(&sy, i, j, n) / count;
            let vx = (box_sum(&sxx, i, j, n) / count - mx * mx).max(0.0);
            let vy = (box_sum(&syy, i, j, n) / count - my * my).max(0.0);
            let cxy = box_sum(&sxy, i, j, n) / count - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    Ok(total / ((h - n + 1) * (w - n + 1)) as f64)
}

/// The three image metrics for one slice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    #[serde(with = "float_or_string")]
    pub psnr: f64,
    pub ssim: f64,
    pub nmse: f64,
}

impl SliceMetrics {
    pub fn compute(v: &ArrayView2<f64>, v_ref: &ArrayView2<f64>) -> Result<Self> {
        Ok(Self { psnr: psnr(v, v_ref)?, ssim: ssim(v, v_ref, &SsimParams::default())?, nmse: nmse(v, v_ref)? })
    }
}

/// Population mean and standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    #[serde(with = "float_or_string")]
    pub mean: f64,
    #[serde(with = "float_or_string")]
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Option<Self> {
        let values: Vec<f64> = values.into_iter().collect();
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        if !mean.is_finite() {
            return Some(Self { mean, std: f64::NAN });
        }
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Self { mean, std: var.sqrt() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub slices: Vec<SliceMetrics>,
    pub psnr: MeanStd,
    pub ssim: MeanStd,
    pub nmse: MeanStd,
}

impl MetricReport {
    pub fn from_slices(slices: Vec<SliceMetrics>) -> Result<Self> {
        let empty = || DimoError::InvalidArgument("metric report needs at least one slice".into());
        Ok(Self {
            psnr: MeanStd::of(slices.iter().map(|s| s.psnr)).ok_or_else(empty)?,
            ssim: MeanStd::of(slices.iter().map(|s| s.ssim)).ok_or_else(empty)?,
            nmse: MeanStd::of(slices.iter().map(|s| s.nmse)).ok_or_else(empty)?,
            slices,
        })
    }
}

/// Mean and population standard deviation of `map` over `roi`.
pub fn roi_stats(map: &ArrayView2<f64>, roi: &ArrayView2<bool>) -> Result<MeanStd> {
    if map.dim() != roi.dim() {
        return Err(DimoError::Shape(format!("map {:?} vs ROI {:?}", map.dim(), roi.dim())));
    }
    let values = Zip::from(map).and(roi).fold(Vec::new(), |mut acc, &v, &r| {
        if r {
            acc.push(v);
        }
        acc
    });
    MeanStd::of(values).ok_or_else(|| DimoError::InvalidArgument("ROI is empty".into()))
}

/// Pixel-wise statistics of repeated stochastic reconstructions.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMaps {
    pub mean_img: Array2<f64>,
    /// Unbiased (n - 1) pixel variance.
    pub variance_map: Array2<f64>,
    /// `|mean - reference|`.
    pub error_map: Array2<f64>,
    pub n_samples: usize,
}

impl UncertaintyMaps {
    pub fn from_samples(samples: &[Array2<f64>], reference: &ArrayView2<f64>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(DimoError::InvalidArgument(format!("need at least 2 samples, got {}", samples.len())));
        }
        let dim = reference.dim();
        if let Some(bad) = samples.iter().find(|s| s.dim() != dim) {
            return Err(DimoError::Shape(format!("sample {:?} vs reference {:?}", bad.dim(), dim)));
        }
        let n = samples.len() as f64;
        let mut mean = Array2::zeros(dim);
        for s in samples {
            mean += s;
        }
        mean /= n;
        let mut var = Array2::zeros(dim);
        for s in samples {
            Zip::from(&mut var).and(s).and(&mean).for_each(|v, x, m| *v += (x - m).powi(2));
        }
        var /= n - 1.0;
        let error_map = Zip::from(&mean).and(reference).map_collect(|m, r| (m - r).abs());
        Ok(Self { mean_img: mean, variance_map: var, error_map, n_samples: samples.len() })
    }
}

/// Draws `n` samples with seeds `base_seed, base_seed + 1, ...` and
/// summarizes them. A failing draw aborts with the number completed.
pub fn uncertainty_study<F>(
    mut sampler: F,
    n: usize,
    base_seed: u64,
    reference: &ArrayView2<f64>,
) -> Result<UncertaintyMaps>
where
    F: FnMut(u64) -> Result<Array2<f64>>,
{
    if n < 2 {
        return Err(DimoError::InvalidArgument(format!("uncertainty study needs n >= 2, got {n}")));
    }
    let mut samples = Vec::with_capacity(n);
    for k in 0..n {
        match sampler(base_seed + k as u64) {
            Ok(s) => samples.push(s),
            Err(e) => {
                return Err(DimoError::Sampler { completed: k, requested: n, reason: e.to_string() });
            }
        }
    }
    UncertaintyMaps::from_samples(&samples, reference)
}

/// Linearly interpolated `q`-th percentile (`q` in `[0, 100]`); sorts in place.
pub fn percentile(values: &mut [f64], q: f64) -> Result<f64> {
    if values.is_empty() || !(0.0..=100.0).contains(&q) || values.iter().any(|v| v.is_nan()) {
        return Err(DimoError::InvalidArgument(format!("percentile {q} of {} values", values.len())));
    }
    values.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(values[lo] + (values[hi] - values[lo]) * (pos - lo as f64))
}

/// Relative roughness `||laplacian(map)||^2 / ||map||^2` over interior pixels.
pub fn high_frequency_energy(map: &ArrayView2<f64>) -> f64 {
    let (h, w) = map.dim();
    if h < 3 || w < 3 {
        return 0.0;
    }
    let mut rough = 0.0;
    let mut total = 0.0;
    for i in 1..h - 1 {
        for j in 1..w - 1 {
            let lap = map[[i - 1, j]] + map[[i + 1, j]] + map[[i, j - 1]] + map[[i, j + 1]] - 4.0 * map[[i, j]];
            rough += lap * lap;
            total += map[[i, j]].powi(2);
        }
    }
    if total == 0.0 {
        0.0
    } else {
        rough / total
    }
}

/// Pixels whose forward-difference gradient magnitude exceeds
/// `rel_threshold * max`, dilated by a square of radius `dilation`.
pub fn edge_mask(reference: &ArrayView2<f64>, rel_threshold: f64, dilation: usize) -> Array2<bool> {
    let (h, w) = reference.dim();
    let grad = Array2::from_shape_fn((h, w), |(i, j)| {
        let gi = if i + 1 < h { reference[[i + 1, j]] - reference[[i, j]] } else { 0.0 };
        let gj = if j + 1 < w { reference[[i, j + 1]] - reference[[i, j]] } else { 0.0 };
        (gi * gi + gj * gj).sqrt()
    });
    let peak = grad.iter().fold(0.0f64, |m, &g| m.max(g));
    let mut out = Array2::from_elem((h, w), false);
    if peak == 0.0 {
        return out;
    }
    for ((i, j), &g) in grad.indexed_iter() {
        if g > rel_threshold * peak {
            // a forward difference straddles pixels i and i+1
            for di in 0..=2 * dilation + 1 {
                for dj in 0..=2 * dilation + 1 {
                    let (ni, nj) = ((i + di).checked_sub(dilation), (j + dj).checked_sub(dilation));
                    if let (Some(ni), Some(nj)) = (ni, nj) {
                        if ni < h && nj < w {
                            out[[ni, nj]] = true;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Share of the total of `map` that falls inside `mask`.
pub fn mass_fraction(map: &ArrayView2<f64>, mask: &ArrayView2<bool>) -> Result<f64> {
    if map.dim() != mask.dim() {
        return Err(DimoError::Shape(format!("map {:?} vs mask {:?}", map.dim(), mask.dim())));
    }
    let total: f64 = map.iter().sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    Ok(Zip::from(map).and(mask).fold(0.0, |acc, &v, &m| if m { acc + v } else { acc }) / total)
}

/// Serializes non-finite floats as the strings `"inf"`, `"-inf"` and `"nan"`.
pub mod float_or_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_nan() {
            s.serialize_str("nan")
        } else if v.is_infinite() {
            s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("unexpected float literal {other}"))),
            },
        }
    }
}
