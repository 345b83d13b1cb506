use std::collections::HashMap;
use std::fs;
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{DimoError, Result};
use crate::net::adam::{Adam, AdamConfig};
use crate::net::unet::UNetConfig;
use crate::net::{DiffusionNet, GaussianPrior};
use crate::schedule::ScheduleConfig;

pub const CHECKPOINT_FORMAT: &str = "dimo-checkpoint-v1";
const WEIGHTS_FILE: &str = "weights.safetensors";
const META_FILE: &str = "checkpoint.json";

/// Scale constants that map physical data to network units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Normalization {
    /// k-space is divided by `scale`.
    Kspace { scale: f64 },
    /// T1 is divided by `t1_scale` seconds, I0 by `i0_scale`.
    Params { t1_scale: f64, i0_scale: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    pub optimizer_steps: u64,
    pub epochs: u64,
    pub seed: u64,
    pub adam: AdamConfig,
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub mode: String,
    pub network: UNetConfig,
    pub schedule: ScheduleConfig,
    pub gd_steps: usize,
    pub guidance: bool,
    pub step_size_init: f64,
    pub step_sizes: Vec<f64>,
    pub normalization: Normalization,
    pub training: TrainingState,
}

/// Writes weights and optimizer moments to one safetensors file and the
/// scalars to a JSON sidecar inside `dir`.
pub fn save_checkpoint(dir: &Path, net: &DiffusionNet, adam: &Adam, meta: &CheckpointMeta) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut tensors = net.store().to_tensors();
    tensors.extend(adam.state_tensors());
    if let Some(prior) = net.prior() {
        tensors.insert(GaussianPrior::MEAN_KEY.into(), prior.mean().clone());
        tensors.insert(GaussianPrior::VAR_KEY.into(), prior.var().clone());
    }
    candle_core::safetensors::save(&tensors, dir.join(WEIGHTS_FILE))?;
    fs::write(dir.join(META_FILE), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

/// Rebuilds the network and optimizer stored in `dir`.
pub fn load_checkpoint(dir: &Path) -> Result<(DiffusionNet, Adam, CheckpointMeta)> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path)
        .map_err(|e| DimoError::Data(format!("cannot read {}: {e}", meta_path.display())))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    if meta.format != CHECKPOINT_FORMAT {
        return Err(DimoError::Data(format!("unsupported checkpoint format {}", meta.format)));
    }
    let tensors: HashMap<String, Tensor> = candle_core::safetensors::load(dir.join(WEIGHTS_FILE), &Device::Cpu)?;
    let mut net = DiffusionNet::new(meta.network, meta.gd_steps, meta.step_size_init, meta.training.seed)?;
    net.store().assign_from(&tensors)?;
    if let (Some(mean), Some(var)) = (tensors.get(GaussianPrior::MEAN_KEY), tensors.get(GaussianPrior::VAR_KEY)) {
        net.set_prior(GaussianPrior::new(mean.clone(), var.clone())?);
    }
    let adam = Adam::restore(meta.training.adam, meta.training.optimizer_steps, &tensors);
    Ok((net, adam, meta))
}
