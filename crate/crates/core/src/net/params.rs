use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{DimoError, Result};

/// Named trainable tensors kept in sorted order so that initialization,
/// optimizer traversal and serialization are reproducible.
#[derive(Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self { vars: BTreeMap::new(), rng: ChaCha8Rng::seed_from_u64(seed), device: Device::Cpu }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, t: Tensor) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(DimoError::InvalidArgument(format!("parameter {name} registered twice")));
        }
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| self.rng.random_range(-bound..=bound) as f32).collect();
        let t = Tensor::from_vec(data, shape, &self.device)?;
        self.insert(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let t = (Tensor::ones(shape, DType::F32, &self.device)? * value)?;
        self.insert(name, t)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn to_tensors(&self) -> HashMap<String, Tensor> {
        self.vars.iter().map(|(k, v)| (k.clone(), v.as_detached_tensor())).collect()
    }

    /// Overwrites every registered parameter from `tensors`; names and
    /// shapes must match exactly.
    pub fn assign_from(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let src = tensors.get(name).ok_or_else(|| DimoError::Data(format!("checkpoint lacks parameter {name}")))?;
            if src.dims() != var.dims() {
                return Err(DimoError::Data(format!(
                    "parameter {name}: checkpoint shape {:?} vs model {:?}",
                    src.dims(),
                    var.dims()
                )));
            }
            var.set(&src.to_dtype(DType::F32)?)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        candle_core::safetensors::save(&self.to_tensors(), path)?;
        Ok(())
    }
}
