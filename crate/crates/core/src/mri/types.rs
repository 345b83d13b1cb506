use ndarray::{Array2, Array3, ArrayView2};
use num_complex::Complex64;

use crate::error::{DimoError, Result};
use crate::mri::fft::check_even_dims;

fn all_finite<'a>(mut it: impl Iterator<Item = &'a Complex64>) -> bool {
    it.all(|v| v.re.is_finite() && v.im.is_finite())
}

/// A single complex image on an (H, W) unit grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexImage {
    data: Array2<Complex64>,
}

impl ComplexImage {
    pub fn new(data: Array2<Complex64>) -> Result<Self> {
        let (h, w) = data.dim();
        check_even_dims(h, w)?;
        if h < 8 || w < 8 {
            return Err(DimoError::Shape(format!("image must be at least 8x8, got {h}x{w}")));
        }
        if !all_finite(data.iter()) {
            return Err(DimoError::InvalidArgument("image contains non-finite values".into()));
        }
        Ok(Self { data })
    }

    pub fn zeros(h: usize, w: usize) -> Result<Self> {
        Self::new(Array2::zeros((h, w)))
    }

    pub fn data(&self) -> &Array2<Complex64> {
        &self.data
    }

    pub fn view(&self) -> ArrayView2<'_, Complex64> {
        self.data.view()
    }

    pub fn into_inner(self) -> Array2<Complex64> {
        self.data
    }

    pub fn dim(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn magnitude(&self) -> Array2<f64> {
        self.data.mapv(|v| v.norm())
    }
}

/// Complex receive-coil sensitivities, shape (J, H, W).
#[derive(Debug, Clone, PartialEq)]
pub struct CoilMaps {
    maps: Array3<Complex64>,
}

impl CoilMaps {
    pub fn new(maps: Array3<Complex64>) -> Result<Self> {
        let (j, h, w) = maps.dim();
        if j == 0 {
            return Err(DimoError::Shape("coil map set needs at least one coil".into()));
        }
        check_even_dims(h, w)?;
        if !all_finite(maps.iter()) {
            return Err(DimoError::InvalidArgument("coil maps contain non-finite values".into()));
        }
        Ok(Self { maps })
    }

    /// Single coil with unit sensitivity everywhere.
    pub fn unit(h: usize, w: usize) -> Result<Self> {
        Self::new(Array3::from_elem((1, h, w), Complex64::new(1.0, 0.0)))
    }

    pub fn maps(&self) -> &Array3<Complex64> {
        &self.maps
    }

    pub fn n_coils(&self) -> usize {
        self.maps.dim().0
    }

    pub fn image_dim(&self) -> (usize, usize) {
        let (_, h, w) = self.maps.dim();
        (h, w)
    }

    /// Per-pixel coil energy `sum_j |S_j|^2`.
    pub fn energy(&self) -> Array2<f64> {
        let (_, h, w) = self.maps.dim();
        let mut e = Array2::zeros((h, w));
        for coil in self.maps.outer_iter() {
            e.zip_mut_with(&coil, |acc, s| *acc += s.norm_sqr());
        }
        e
    }
}

/// Multi-coil k-space in centered-DC layout, shape (J, H, W).
#[derive(Debug, Clone, PartialEq)]
pub struct KSpace {
    data: Array3<Complex64>,
}

impl KSpace {
    pub fn new(data: Array3<Complex64>) -> Result<Self> {
        let (j, h, w) = data.dim();
        if j == 0 {
            return Err(DimoError::Shape("k-space needs at least one coil".into()));
        }
        check_even_dims(h, w)?;
        if !all_finite(data.iter()) {
            return Err(DimoError::InvalidArgument("k-space contains non-finite values".into()));
        }
        Ok(Self { data })
    }

    pub fn zeros(j: usize, h: usize, w: usize) -> Self {
        Self { data: Array3::zeros((j, h, w)) }
    }

    pub fn data(&self) -> &Array3<Complex64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<Complex64> {
        &mut self.data
    }

    pub fn into_inner(self) -> Array3<Complex64> {
        self.data
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }
}

/// Fully sampled region that every mask of a given scheme must contain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "size")]
pub enum CenterRegion {
    None,
    /// Contiguous block of full phase-encode columns centered on `w/2`.
    Lines(usize),
    /// Square block centered on `(h/2, w/2)`.
    Block(usize),
}

impl CenterRegion {
    /// Index range `[start, start + n)` of a centered run of `n` entries.
    pub(crate) fn centered_range(len: usize, n: usize) -> std::ops::Range<usize> {
        let start = len / 2 - n / 2;
        start..start + n
    }

    pub fn contains(&self, h: usize, w: usize, i: usize, j: usize) -> bool {
        match *self {
            CenterRegion::None => false,
            CenterRegion::Lines(n) => Self::centered_range(w, n).contains(&j),
            CenterRegion::Block(n) => {
                Self::centered_range(h, n).contains(&i) && Self::centered_range(w, n).contains(&j)
            }
        }
    }
}

/// Binary k-space selection pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingMask {
    mask: Array2<bool>,
    af: f64,
    center: CenterRegion,
    min_distance: Option<f64>,
}

impl SamplingMask {
    pub fn new(mask: Array2<bool>, af: f64, center: CenterRegion) -> Result<Self> {
        let (h, w) = mask.dim();
        check_even_dims(h, w)?;
        if !(af >= 1.0) || !af.is_finite() {
            return Err(DimoError::InvalidArgument(format!("acceleration factor {af} must be >= 1")));
        }
        for ((i, j), &m) in mask.indexed_iter() {
            if !m && center.contains(h, w, i, j) {
                return Err(DimoError::Mask(format!("center region not fully sampled at ({i},{j})")));
            }
        }
        let out = Self { mask, af, center, min_distance: None };
        let frac = out.sampled_fraction();
        if frac < 0.5 / af - 1e-12 || frac > 2.0 / af + 1e-12 {
            return Err(DimoError::Mask(format!(
                "sampled fraction {frac:.4} outside [{:.4}, {:.4}] for AF {af}",
                0.5 / af,
                2.0 / af
            )));
        }
        Ok(out)
    }

    /// All-ones mask (AF = 1).
    pub fn full(h: usize, w: usize) -> Result<Self> {
        Self::new(Array2::from_elem((h, w), true), 1.0, CenterRegion::None)
    }

    pub(crate) fn with_min_distance(mut self, r: f64) -> Self {
        self.min_distance = Some(r);
        self
    }

    pub fn mask(&self) -> &Array2<bool> {
        &self.mask
    }

    pub fn af(&self) -> f64 {
        self.af
    }

    pub fn center(&self) -> CenterRegion {
        self.center
    }

    /// Exclusion radius used by Poisson-disk masks.
    pub fn min_distance(&self) -> Option<f64> {
        self.min_distance
    }

    pub fn dim(&self) -> (usize, usize) {
        self.mask.dim()
    }

    pub fn sampled_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn sampled_fraction(&self) -> f64 {
        self.sampled_count() as f64 / self.mask.len() as f64
    }

    /// Mask as 0/1 floats.
    pub fn to_f64(&self) -> Array2<f64> {
        self.mask.mapv(|m| if m { 1.0 } else { 0.0 })
    }
}

/// Encoding operator `A = P F S` for one acquisition.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardModel {
    coil_maps: CoilMaps,
    mask: SamplingMask,
}

impl ForwardModel {
    pub fn new(coil_maps: CoilMaps, mask: SamplingMask) -> Result<Self> {
        if coil_maps.image_dim() != mask.dim() {
            return Err(DimoError::Shape(format!("coil maps {:?} vs mask {:?}", coil_maps.image_dim(), mask.dim())));
        }
        Ok(Self { coil_maps, mask })
    }

    pub fn coil_maps(&self) -> &CoilMaps {
        &self.coil_maps
    }

    pub fn mask(&self) -> &SamplingMask {
        &self.mask
    }

    pub fn n_coils(&self) -> usize {
        self.coil_maps.n_coils()
    }

    pub fn image_dim(&self) -> (usize, usize) {
        self.mask.dim()
    }

    pub fn kspace_dim(&self) -> (usize, usize, usize) {
        let (h, w) = self.image_dim();
        (self.n_coils(), h, w)
    }
}
