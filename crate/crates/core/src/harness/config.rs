//! Experiment configuration: TOML files, dotted-key overrides and presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{DimoError, Result};
use crate::harness::phantom::{Contrast, PhantomSpec};
use crate::mri::{make_cartesian_mask, make_poisson_mask, SamplingMask};
use crate::net::{AdamConfig, UNetConfig};
use crate::schedule::ScheduleConfig;
use crate::vfa::{AcquisitionProtocol, FitSettings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Static,
    Quant,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Static => "static",
            Mode::Quant => "quant",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Cartesian,
    Poisson,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSpec {
    pub kind: MaskKind,
    pub af: f64,
    /// Fully sampled center lines (Cartesian) or block side (Poisson).
    pub center: usize,
}

impl MaskSpec {
    pub fn build(&self, h: usize, w: usize, seed: u64) -> Result<SamplingMask> {
        match self.kind {
            MaskKind::Cartesian => make_cartesian_mask(h, w, self.af, self.center, seed),
            MaskKind::Poisson => make_poisson_mask(h, w, self.af, self.center, seed),
        }
    }

    /// Seed of the mask for `slice` and flip-angle `angle`.
    pub fn seed_for(base: u64, slice: usize, angle: usize) -> u64 {
        base.wrapping_add((slice as u64) << 16).wrapping_add(angle as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    pub height: usize,
    pub width: usize,
    pub n_coils: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub noise_level: f64,
    pub phase_amplitude: f64,
    pub contrast: Contrast,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub base_width: usize,
    pub depth: usize,
    pub time_embed_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub step_size_lr: f64,
    pub clip_norm: Option<f64>,
    pub checkpoint_every: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub enabled: bool,
    pub gd_steps: usize,
    pub step_size_init: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub tr: f64,
    pub flip_angles_deg: Vec<f64>,
}

impl ProtocolConfig {
    pub fn build(&self) -> Result<AcquisitionProtocol> {
        AcquisitionProtocol::from_degrees(self.tr, &self.flip_angles_deg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub t1_floor: f64,
    pub t1_ceil: f64,
    /// Fit threshold as a fraction of the peak fully sampled magnitude.
    pub signal_floor_rel: f64,
}

impl FitConfig {
    pub fn settings(&self, peak: f64) -> FitSettings {
        FitSettings { t1_floor: self.t1_floor, t1_ceil: self.t1_ceil, signal_floor: self.signal_floor_rel * peak }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Acceleration factors evaluated by `run`.
    pub afs: Vec<f64>,
    pub uncertainty_counts: Vec<usize>,
    pub uncertainty_slice: usize,
    pub edge_threshold: f64,
    pub edge_dilation: usize,
    pub roi_erosion: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub seed: u64,
    pub work_dir: PathBuf,
    pub phantom: PhantomConfig,
    pub mask: MaskSpec,
    pub schedule: ScheduleConfig,
    pub network: NetworkConfig,
    pub training: TrainingConfig,
    pub guidance: GuidanceConfig,
    pub protocol: ProtocolConfig,
    pub fit: FitConfig,
    pub evaluation: EvaluationConfig,
}

/// Named sub-seeds derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub phantom: u64,
    pub mask: u64,
    pub training: u64,
    pub sampling: u64,
}

impl ExperimentConfig {
    pub fn desk_static() -> Self {
        Self {
            mode: Mode::Static,
            seed: 2024,
            work_dir: PathBuf::from("runs/static"),
            phantom: PhantomConfig {
                height: 64,
                width: 64,
                n_coils: 4,
                n_train: 48,
                n_test: 8,
                noise_level: 0.002,
                phase_amplitude: 0.5,
                contrast: Contrast::ProtonDensity,
            },
            mask: MaskSpec { kind: MaskKind::Cartesian, af: 4.0, center: 8 },
            schedule: ScheduleConfig { steps: 200, beta_start: 1e-4, beta_end: 0.1 },
            network: NetworkConfig { base_width: 16, depth: 3, time_embed_dim: 128 },
            training: TrainingConfig {
                epochs: 100,
                batch_size: 4,
                lr: 1e-3,
                step_size_lr: 1e-2,
                clip_norm: Some(1.0),
                checkpoint_every: 10,
            },
            guidance: GuidanceConfig { enabled: true, gd_steps: 2, step_size_init: 0.5 },
            protocol: ProtocolConfig { tr: 0.04, flip_angles_deg: vec![5.0, 10.0, 20.0, 40.0] },
            fit: FitConfig { t1_floor: 0.05, t1_ceil: 5.0, signal_floor_rel: 0.02 },
            evaluation: EvaluationConfig {
                afs: vec![4.0, 5.0, 6.0],
                uncertainty_counts: vec![10, 50],
                uncertainty_slice: 0,
                edge_threshold: 0.1,
                edge_dilation: 3,
                roi_erosion: 1,
            },
        }
    }

    pub fn desk_quant() -> Self {
        let mut cfg = Self::desk_static();
        cfg.mode = Mode::Quant;
        cfg.work_dir = PathBuf::from("runs/quant");
        cfg.evaluation.afs = vec![4.0];
        cfg
    }

    /// Full-resolution settings with 1000 diffusion steps.
    pub fn paper_static() -> Self {
        let mut cfg = Self::desk_static();
        cfg.phantom.height = 320;
        cfg.phantom.width = 320;
        cfg.phantom.n_coils = 18;
        cfg.mask.center = 20;
        cfg.schedule = ScheduleConfig { steps: 1000, beta_start: 1e-4, beta_end: 0.02 };
        cfg.network = NetworkConfig { base_width: 64, depth: 3, time_embed_dim: 128 };
        cfg.training.epochs = 7000;
        cfg.training.lr = 1e-4;
        cfg.guidance.step_size_init = 1e-4;
        cfg
    }

    pub fn paper_quant() -> Self {
        let mut cfg = Self::paper_static();
        cfg.mode = Mode::Quant;
        cfg.phantom.n_coils = 20;
        cfg.schedule = ScheduleConfig { steps: 1000, beta_start: 1e-6, beta_end: 0.05 };
        cfg.work_dir = PathBuf::from("runs/quant");
        cfg.evaluation.afs = vec![4.0];
        cfg
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk-static" => Ok(Self::desk_static()),
            "desk-quant" => Ok(Self::desk_quant()),
            "paper-static" => Ok(Self::paper_static()),
            "paper-quant" => Ok(Self::paper_quant()),
            other => Err(DimoError::Config(format!("unknown preset {other}"))),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| DimoError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DimoError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| DimoError::Config(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    /// Applies `key.path=value` overrides; values parse as TOML literals
    /// and fall back to plain strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut root = toml::Value::try_from(self).map_err(|e| DimoError::Config(e.to_string()))?;
        for item in overrides {
            let (key, raw) =
                item.split_once('=').ok_or_else(|| DimoError::Config(format!("override {item} lacks '='")))?;
            let value = parse_literal(raw.trim());
            let mut node = &mut root;
            let parts: Vec<&str> = key.trim().split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let table = node
                    .as_table_mut()
                    .ok_or_else(|| DimoError::Config(format!("{key}: {part} is not inside a table")))?;
                if i + 1 == parts.len() {
                    if !table.contains_key(*part) && *part != "clip_norm" {
                        return Err(DimoError::Config(format!("unknown config key {key}")));
                    }
                    table.insert(part.to_string(), value.clone());
                    break;
                }
                node = table.get_mut(*part).ok_or_else(|| DimoError::Config(format!("unknown config key {key}")))?;
            }
        }
        let cfg: Self = root.try_into().map_err(|e: toml::de::Error| DimoError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn seeds(&self) -> Seeds {
        Seeds {
            phantom: self.seed,
            mask: self.seed.wrapping_add(1_000_003),
            training: self.seed.wrapping_add(2_000_003),
            sampling: self.seed.wrapping_add(3_000_017),
        }
    }

    pub fn phantom_spec(&self) -> PhantomSpec {
        PhantomSpec {
            height: self.phantom.height,
            width: self.phantom.width,
            n_coils: self.phantom.n_coils,
            n_slices: self.phantom.n_train + self.phantom.n_test,
            noise_level: self.phantom.noise_level,
            phase_amplitude: self.phantom.phase_amplitude,
            seed: self.seeds().phantom,
        }
    }

    pub fn unet_config(&self) -> UNetConfig {
        let in_channels = match self.mode {
            Mode::Static => 2 * self.phantom.n_coils,
            Mode::Quant => crate::quant_dimo::PARAM_CHANNELS,
        };
        UNetConfig {
            in_channels,
            base_width: self.network.base_width,
            depth: self.network.depth,
            time_embed_dim: self.network.time_embed_dim,
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            lr: self.training.lr,
            step_size_lr: self.training.step_size_lr,
            clip_norm: self.training.clip_norm,
            ..AdamConfig::default()
        }
    }

    /// Checks every module precondition the experiment will rely on.
    pub fn validate(&self) -> Result<()> {
        self.phantom_spec().validate()?;
        if self.phantom.n_train == 0 || self.phantom.n_test == 0 {
            return Err(DimoError::Config("need at least one training and one test slice".into()));
        }
        let seeds = self.seeds();
        for af in std::iter::once(self.mask.af).chain(self.evaluation.afs.iter().copied()) {
            MaskSpec { af, ..self.mask }
                .build(self.phantom.height, self.phantom.width, seeds.mask)
                .map_err(|e| DimoError::Config(format!("mask at AF {af}: {e}")))?;
        }
        self.schedule.build().map_err(|e| DimoError::Config(e.to_string()))?;
        self.unet_config().validate().map_err(|e| DimoError::Config(e.to_string()))?;
        let t = &self.training;
        if t.batch_size == 0 || !(t.lr > 0.0) || !(t.step_size_lr >= 0.0) || t.checkpoint_every == 0 {
            return Err(DimoError::Config(
                "batch size, learning rates and checkpoint interval must be positive".into(),
            ));
        }
        if let Some(c) = t.clip_norm {
            if !(c > 0.0) {
                return Err(DimoError::Config(format!("clip norm {c} must be positive")));
            }
        }
        if !(self.guidance.step_size_init > 0.0 && self.guidance.step_size_init.is_finite()) {
            return Err(DimoError::Config("initial step size must be positive".into()));
        }
        self.protocol.build().map_err(|e| DimoError::Config(e.to_string()))?;
        let f = &self.fit;
        if !(f.t1_floor > 0.0 && f.t1_ceil > f.t1_floor && f.signal_floor_rel >= 0.0) {
            return Err(DimoError::Config("fit needs 0 < t1_floor < t1_ceil and a non-negative signal floor".into()));
        }
        let e = &self.evaluation;
        if e.uncertainty_counts.iter().any(|&n| n < 2) {
            return Err(DimoError::Config("uncertainty sample counts must be at least 2".into()));
        }
        if e.uncertainty_slice >= self.phantom.n_test {
            return Err(DimoError::Config(format!(
                "uncertainty slice {} outside the {} test slices",
                e.uncertainty_slice, self.phantom.n_test
            )));
        }
        if !(e.edge_threshold > 0.0 && e.edge_threshold < 1.0) {
            return Err(DimoError::Config("edge threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}
