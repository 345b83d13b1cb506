//! Synthetic ellipse phantoms, Gaussian-profile coil maps and fully
//! sampled multi-coil k-space.

use std::f64::consts::PI;

use ndarray::{Array2, Array3, Axis};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{DimoError, Result};
use crate::mri::{apply_forward, CoilMaps, ComplexImage, ForwardModel, KSpace, SamplingMask};
use crate::vfa::{vfa_fit, vfa_forward, AcquisitionProtocol, FitSettings, MultiFlipImages, ParamMaps};

/// Static image contrast.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Contrast {
    ProtonDensity,
    T2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    pub n_coils: usize,
    pub n_slices: usize,
    /// Standard deviation of the complex k-space noise relative to the
    /// peak image magnitude.
    pub noise_level: f64,
    /// Peak amplitude in radians of the smooth background phase.
    pub phase_amplitude: f64,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 || self.height % 2 == 1 || self.width % 2 == 1 {
            return Err(DimoError::Config(format!(
                "phantom size {}x{} must be even and at least 8x8",
                self.height, self.width
            )));
        }
        if self.n_coils == 0 || self.n_slices == 0 {
            return Err(DimoError::Config("phantom needs at least one coil and one slice".into()));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return Err(DimoError::Config(format!("noise level {} must be non-negative", self.noise_level)));
        }
        if !self.phase_amplitude.is_finite() {
            return Err(DimoError::Config("phase amplitude must be finite".into()));
        }
        Ok(())
    }

    fn grid(&self) -> Grid {
        Grid { h: self.height, w: self.width }
    }
}

#[derive(Clone, Copy)]
struct Grid {
    h: usize,
    w: usize,
}

impl Grid {
    /// Pixel center in normalized coordinates spanning [-1, 1).
    fn coords(&self, i: usize, j: usize) -> (f64, f64) {
        let y = 2.0 * i as f64 / self.h as f64 - 1.0;
        let x = 2.0 * j as f64 / self.w as f64 - 1.0;
        (x, y)
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    fn scaled(&self, f: f64) -> Self {
        Self { a: self.a * f, b: self.b * f, ..*self }
    }

    /// Point inside the ellipse at polar offset `(r, ang)` of its axes.
    fn point(&self, r: f64, ang: f64) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        let u = r * self.a * ang.cos();
        let v = r * self.b * ang.sin();
        (self.cx + c * u - s * v, self.cy + s * u + c * v)
    }
}

fn head(rng: &mut ChaCha8Rng) -> Ellipse {
    Ellipse {
        cx: rng.random_range(-0.04..0.04),
        cy: rng.random_range(-0.04..0.04),
        a: rng.random_range(0.68..0.80),
        b: rng.random_range(0.80..0.90),
        theta: rng.random_range(-0.15..0.15),
    }
}

fn smooth_phase(grid: Grid, amplitude: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let gx: f64 = rng.random_range(-1.0..1.0);
    let gy: f64 = rng.random_range(-1.0..1.0);
    let q: f64 = rng.random_range(-1.0..1.0);
    Array2::from_shape_fn((grid.h, grid.w), |(i, j)| {
        let (x, y) = grid.coords(i, j);
        amplitude * (0.5 * gx * x + 0.5 * gy * y + 0.3 * q * (x * x + y * y)).clamp(-1.0, 1.0)
    })
}

/// Gaussian-profile coils around the field of view with a linear phase
/// each, normalized to unit root-sum-of-squares at every pixel.
pub fn gaussian_coil_maps(height: usize, width: usize, n_coils: usize, seed: u64) -> Result<CoilMaps> {
    let grid = Grid { h: height, w: width };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset: f64 = rng.random_range(0.0..2.0 * PI);
    let mut maps = Array3::zeros((n_coils, height, width));
    for (c, mut map) in maps.outer_iter_mut().enumerate() {
        let ang = offset + 2.0 * PI * c as f64 / n_coils as f64;
        let (px, py) = (1.3 * ang.cos(), 1.3 * ang.sin());
        let width_c: f64 = rng.random_range(0.6..0.7);
        let phase0: f64 = rng.random_range(-PI..PI);
        let slope: f64 = rng.random_range(-0.8..0.8);
        for ((i, j), v) in map.indexed_iter_mut() {
            let (x, y) = grid.coords(i, j);
            let d2 = (x - px).powi(2) + (y - py).powi(2);
            let mag = (-d2 / (2.0 * width_c * width_c)).exp();
            *v = Complex64::from_polar(mag, phase0 + slope * (x * ang.cos() + y * ang.sin()));
        }
    }
    let energy = maps.map_axis(Axis(0), |c| c.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt());
    for mut map in maps.outer_iter_mut() {
        map.zip_mut_with(&energy, |v, e| *v /= *e);
    }
    CoilMaps::new(maps)
}

fn static_slice(spec: &PhantomSpec, contrast: Contrast, rng: &mut ChaCha8Rng) -> Array2<Complex64> {
    let grid = spec.grid();
    let outer = head(rng);
    let brain = outer.scaled(rng.random_range(0.86..0.90));
    let (skull, tissue) = match contrast {
        Contrast::ProtonDensity => (0.95, rng.random_range(0.55..0.70)),
        Contrast::T2 => (0.35, rng.random_range(0.40..0.50)),
    };
    let n_features = rng.random_range(4..=7);
    let features: Vec<(Ellipse, f64)> = (0..n_features)
        .map(|_| {
            let (cx, cy) = brain.point(rng.random_range(0.0..0.7), rng.random_range(0.0..2.0 * PI));
            let e = Ellipse {
                cx,
                cy,
                a: rng.random_range(0.05..0.22),
                b: rng.random_range(0.05..0.22),
                theta: rng.random_range(0.0..PI),
            };
            let level = match contrast {
                Contrast::ProtonDensity => rng.random_range(0.2..1.0),
                Contrast::T2 => rng.random_range(0.1..1.0),
            };
            (e, level)
        })
        .collect();
    let phase = smooth_phase(grid, spec.phase_amplitude, rng);
    Array2::from_shape_fn((grid.h, grid.w), |(i, j)| {
        let (x, y) = grid.coords(i, j);
        let mut v = 0.0;
        if outer.contains(x, y) {
            v = skull;
        }
        if brain.contains(x, y) {
            v = tissue;
            for (e, level) in &features {
                if e.contains(x, y) {
                    v = *level;
                }
            }
        }
        Complex64::from_polar(v, phase[[i, j]])
    })
}

fn add_kspace_noise(k: &mut Array3<Complex64>, std: f64, rng: &mut ChaCha8Rng) {
    if std == 0.0 {
        return;
    }
    let s = std / 2f64.sqrt();
    for v in k.iter_mut() {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        *v += Complex64::new(re * s, im * s);
    }
}

fn expand_to_kspace(maps: &CoilMaps, img: &Array2<Complex64>) -> Result<Array3<Complex64>> {
    let (h, w) = maps.image_dim();
    let model = ForwardModel::new(maps.clone(), SamplingMask::full(h, w)?)?;
    Ok(apply_forward(&model, &ComplexImage::new(img.clone())?)?.into_inner())
}

/// Ground-truth images with coil maps and fully sampled k-space.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticPhantom {
    pub images: Vec<ComplexImage>,
    pub coil_maps: Vec<CoilMaps>,
    pub kspace: Vec<KSpace>,
}

pub fn make_static_phantom(spec: &PhantomSpec, contrast: Contrast) -> Result<StaticPhantom> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let array = gaussian_coil_maps(spec.height, spec.width, spec.n_coils, rng.random())?;
    let mut out = StaticPhantom { images: Vec::new(), coil_maps: Vec::new(), kspace: Vec::new() };
    for _ in 0..spec.n_slices {
        let img = static_slice(spec, contrast, &mut rng);
        let maps = array.clone();
        let mut k = expand_to_kspace(&maps, &img)?;
        add_kspace_noise(&mut k, spec.noise_level, &mut rng);
        out.images.push(ComplexImage::new(img)?);
        out.coil_maps.push(maps);
        out.kspace.push(KSpace::new(k)?);
    }
    Ok(out)
}

/// A designed tissue class of the quantitative phantom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TissueRegion {
    pub name: String,
    pub label: u8,
    pub t1: f64,
    pub pd: f64,
}

pub fn default_regions() -> Vec<TissueRegion> {
    let r = |name: &str, label, t1, pd| TissueRegion { name: name.into(), label, t1, pd };
    vec![
        r("scalp", 1, 0.35, 0.90),
        r("cortex", 2, 1.45, 0.85),
        r("white_matter", 3, 0.895, 0.70),
        r("putamen", 4, 1.311, 0.80),
        r("ventricle", 5, 2.80, 1.00),
    ]
}

/// Designed parameter maps, region labels and per-angle fully sampled
/// k-space of every slice.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantPhantom {
    pub regions: Vec<TissueRegion>,
    pub design: Vec<ParamMaps>,
    pub labels: Vec<Array2<u8>>,
    pub coil_maps: Vec<CoilMaps>,
    /// `kspace[slice][angle]`.
    pub kspace: Vec<Vec<KSpace>>,
}

fn quant_labels(grid: Grid, rng: &mut ChaCha8Rng) -> Array2<u8> {
    let outer = head(rng);
    let cortex = outer.scaled(rng.random_range(0.86..0.90));
    let wm = cortex.scaled(rng.random_range(0.80..0.86));
    let dx = rng.random_range(0.22..0.30);
    let putamen: Vec<Ellipse> = [-1.0, 1.0]
        .iter()
        .map(|s| Ellipse {
            cx: wm.cx + s * dx,
            cy: wm.cy + rng.random_range(-0.05..0.05),
            a: rng.random_range(0.08..0.11),
            b: rng.random_range(0.15..0.20),
            theta: s * rng.random_range(0.0..0.3),
        })
        .collect();
    let ventricles: Vec<Ellipse> = [-1.0, 1.0]
        .iter()
        .map(|s| Ellipse {
            cx: wm.cx + s * rng.random_range(0.06..0.09),
            cy: wm.cy - rng.random_range(0.05..0.12),
            a: rng.random_range(0.04..0.06),
            b: rng.random_range(0.14..0.22),
            theta: -s * rng.random_range(0.0..0.3),
        })
        .collect();
    Array2::from_shape_fn((grid.h, grid.w), |(i, j)| {
        let (x, y) = grid.coords(i, j);
        if ventricles.iter().any(|e| e.contains(x, y)) {
            5
        } else if putamen.iter().any(|e| e.contains(x, y)) {
            4
        } else if wm.contains(x, y) {
            3
        } else if cortex.contains(x, y) {
            2
        } else if outer.contains(x, y) {
            1
        } else {
            0
        }
    })
}

pub fn make_quant_phantom(
    spec: &PhantomSpec,
    regions: &[TissueRegion],
    protocol: &AcquisitionProtocol,
    fit: &FitSettings,
) -> Result<QuantPhantom> {
    spec.validate()?;
    for r in regions {
        if !(0.2..=3.0).contains(&r.t1) || !(r.pd > 0.0) || r.label == 0 {
            return Err(DimoError::Config(format!(
                "region {} needs a nonzero label, T1 in [0.2, 3] s and positive PD",
                r.name
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let array = gaussian_coil_maps(spec.height, spec.width, spec.n_coils, rng.random())?;
    let grid = spec.grid();
    let mut out = QuantPhantom {
        regions: regions.to_vec(),
        design: Vec::new(),
        labels: Vec::new(),
        coil_maps: Vec::new(),
        kspace: Vec::new(),
    };
    for _ in 0..spec.n_slices {
        let labels = quant_labels(grid, &mut rng);
        let phase = smooth_phase(grid, spec.phase_amplitude, &mut rng);
        let lookup = |l: u8| regions.iter().find(|r| r.label == l);
        let t1 = labels.mapv(|l| lookup(l).map_or(fit.t1_floor, |r| r.t1));
        let i0 = Array2::from_shape_fn((grid.h, grid.w), |(i, j)| {
            lookup(labels[[i, j]]).map_or(Complex64::new(0.0, 0.0), |r| Complex64::from_polar(r.pd, phase[[i, j]]))
        });
        let params = ParamMaps::new(t1, i0)?;
        let maps = array.clone();
        let imgs = vfa_forward(&params, protocol)?;
        let mut per_angle = Vec::with_capacity(protocol.n_angles());
        for img in imgs.imgs().outer_iter() {
            let mut k = expand_to_kspace(&maps, &img.to_owned())?;
            add_kspace_noise(&mut k, spec.noise_level, &mut rng);
            per_angle.push(KSpace::new(k)?);
        }
        out.design.push(params);
        out.labels.push(labels);
        out.coil_maps.push(maps);
        out.kspace.push(per_angle);
    }
    Ok(out)
}

/// Pixel-wise fit of the fully sampled, SENSE-combined images of one slice.
pub fn reference_fit(
    kspace: &[KSpace],
    maps: &CoilMaps,
    protocol: &AcquisitionProtocol,
    fit: &FitSettings,
) -> Result<crate::vfa::VfaFit> {
    let (h, w) = maps.image_dim();
    let mut imgs = Array3::zeros((kspace.len(), h, w));
    for (k, f) in kspace.iter().enumerate() {
        imgs.index_axis_mut(Axis(0), k).assign(crate::mri::reconstruct_image(f, maps)?.data());
    }
    vfa_fit(&MultiFlipImages::new(imgs)?, protocol, fit)
}

/// Erodes a boolean mask by `radius` pixels with a square element.
pub fn erode(mask: &Array2<bool>, radius: usize) -> Array2<bool> {
    let (h, w) = mask.dim();
    let r = radius as isize;
    Array2::from_shape_fn((h, w), |(i, j)| {
        (-r..=r).all(|di| {
            (-r..=r).all(|dj| {
                let (y, x) = (i as isize + di, j as isize + dj);
                y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[[y as usize, x as usize]]
            })
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mri::reconstruct_image;

    fn spec(noise: f64) -> PhantomSpec {
        PhantomSpec {
            height: 32,
            width: 32,
            n_coils: 4,
            n_slices: 2,
            noise_level: noise,
            phase_amplitude: 0.5,
            seed: 9,
        }
    }

    #[test]
    fn coil_maps_have_unit_sos() {
        let maps = gaussian_coil_maps(16, 16, 4, 3).unwrap();
        assert!(maps.energy().iter().all(|e| (e - 1.0).abs() < 1e-12));
    }

    #[test]
    fn static_kspace_round_trips_to_image() {
        let p = make_static_phantom(&spec(0.0), Contrast::ProtonDensity).unwrap();
        for ((img, maps), k) in p.images.iter().zip(&p.coil_maps).zip(&p.kspace) {
            let back = reconstruct_image(k, maps).unwrap();
            let err = (back.data() - img.data()).iter().fold(0.0f64, |m, v| m.max(v.norm()));
            assert!(err < 1e-12, "{err}");
        }
    }

    #[test]
    fn phantoms_are_deterministic() {
        let a = make_static_phantom(&spec(0.01), Contrast::T2).unwrap();
        let b = make_static_phantom(&spec(0.01), Contrast::T2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn quant_phantom_fit_recovers_design() {
        let proto = AcquisitionProtocol::from_degrees(0.04, &[5.0, 10.0, 20.0, 40.0]).unwrap();
        let fit = FitSettings::default();
        let p = make_quant_phantom(&spec(0.0), &default_regions(), &proto, &fit).unwrap();
        for s in 0..2 {
            let f = reference_fit(&p.kspace[s], &p.coil_maps[s], &proto, &FitSettings::relative_to(1.0)).unwrap();
            for region in &p.regions {
                let mut seen = false;
                for ((l, t1), ok) in p.labels[s].iter().zip(f.params.t1()).zip(&f.valid) {
                    if *l == region.label {
                        seen = true;
                        assert!(*ok);
                        assert!((t1 - region.t1).abs() / region.t1 < 1e-6, "{} {t1}", region.name);
                    }
                }
                assert!(seen, "region {} missing", region.name);
            }
        }
    }

    #[test]
    fn erosion_shrinks_squares() {
        let mut m = Array2::from_elem((8, 8), false);
        m.slice_mut(ndarray::s![1..6, 1..6]).fill(true);
        assert_eq!(erode(&m, 1).iter().filter(|v| **v).count(), 9);
    }
}
