use std::collections::{BTreeMap, HashMap};

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{DimoError, Result};
use crate::net::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    /// Learning rate for parameters under the `step_sizes.` prefix.
    pub step_size_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, step_size_lr: 1e-2, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: Some(1.0) }
    }
}

/// Adam with bias correction. Moments are kept per parameter name so the
/// state can be checkpointed and restored exactly.
#[derive(Debug)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

pub const STEP_SIZE_PREFIX: &str = "step_sizes.";

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update from `grads`; returns the pre-clip gradient norm.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore) -> Result<f64> {
        let mut present = Vec::new();
        let mut sq_norm = 0.0f64;
        for (name, var) in store.iter() {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq_norm += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
                present.push((name, var, g));
            }
        }
        let norm = sq_norm.sqrt();
        if !norm.is_finite() {
            return Err(DimoError::InvalidArgument(format!("non-finite gradient norm {norm}")));
        }
        let scale = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, var, g) in present {
            let g = (g * scale)?;
            let m_prev = match self.first.get(name) {
                Some(m) => m.clone(),
                None => g.zeros_like()?,
            };
            let v_prev = match self.second.get(name) {
                Some(v) => v.clone(),
                None => g.zeros_like()?,
            };
            let m = ((m_prev * c.beta1)? + (&g * (1.0 - c.beta1))?)?;
            let v = ((v_prev * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let lr = if name.starts_with(STEP_SIZE_PREFIX) { c.step_size_lr } else { c.lr };
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + c.eps)?)?;
            var.set(&(var.as_tensor() - (update * lr)?)?)?;
            self.first.insert(name.clone(), m);
            self.second.insert(name.clone(), v);
        }
        Ok(norm)
    }

    /// Moment tensors keyed `adam.m.<name>` and `adam.v.<name>`.
    pub fn state_tensors(&self) -> HashMap<String, Tensor> {
        let mut out = HashMap::new();
        for (k, t) in &self.first {
            out.insert(format!("adam.m.{k}"), t.clone());
        }
        for (k, t) in &self.second {
            out.insert(format!("adam.v.{k}"), t.clone());
        }
        out
    }

    pub fn restore(config: AdamConfig, step: u64, tensors: &HashMap<String, Tensor>) -> Self {
        let mut adam = Self::new(config);
        adam.step = step;
        for (k, t) in tensors {
            if let Some(name) = k.strip_prefix("adam.m.") {
                adam.first.insert(name.to_string(), t.clone());
            } else if let Some(name) = k.strip_prefix("adam.v.") {
                adam.second.insert(name.to_string(), t.clone());
            }
        }
        adam
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new(0);
        let x = store.constant("x", &[2], 3.0).unwrap();
        let cfg = AdamConfig { lr: 0.1, clip_norm: None, ..AdamConfig::default() };
        let mut adam = Adam::new(cfg);
        for _ in 0..300 {
            let loss = x.sqr().unwrap().sum_all().unwrap();
            adam.step(&store, &loss.backward().unwrap()).unwrap();
        }
        let v: Vec<f32> = store.get("x").unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|a| a.abs() < 0.05), "{v:?}");
        assert_eq!(adam.step_count(), 300);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new(0);
        let x = store.constant("x", &[1], 1.0).unwrap();
        let s = store.constant("step_sizes.rho", &[1], 1.0).unwrap();
        let mut adam = Adam::new(AdamConfig { lr: 0.01, step_size_lr: 0.5, clip_norm: None, ..AdamConfig::default() });
        let loss = (x * 7.0).unwrap().sum_all().unwrap().add(&s.sum_all().unwrap()).unwrap();
        adam.step(&store, &loss.backward().unwrap()).unwrap();
        let xv = store.get("x").unwrap().to_vec1::<f32>().unwrap()[0];
        let sv = store.get("step_sizes.rho").unwrap().to_vec1::<f32>().unwrap()[0];
        assert!((xv - 0.99).abs() < 1e-5);
        assert!((sv - 0.5).abs() < 1e-5);
    }

    #[test]
    fn state_round_trip() {
        let mut store = ParamStore::new(0);
        let x = store.constant("x", &[3], 2.0).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        let loss = x.sqr().unwrap().sum_all().unwrap();
        adam.step(&store, &loss.backward().unwrap()).unwrap();
        let restored = Adam::restore(*adam.config(), adam.step_count(), &adam.state_tensors());
        assert_eq!(restored.step_count(), 1);
        assert_eq!(restored.first.len(), 1);
        assert_eq!(restored.second.len(), 1);
    }
}
