//! Noise-prediction network, trainable gradient-descent step sizes,
//! optimizer and checkpointing.

mod adam;
mod checkpoint;
mod layers;
mod params;
pub mod physics;
mod unet;

use candle_core::{Device, Tensor};

pub use adam::{Adam, AdamConfig, STEP_SIZE_PREFIX};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointMeta, Normalization, TrainingState, CHECKPOINT_FORMAT,
};
pub use layers::{timestep_embedding, Conv1x1, Conv3x3, Dense, GroupNorm};
pub use params::ParamStore;
pub use unet::{training_loss, NoisePredictor, UNet, UNetConfig};

use crate::error::{DimoError, Result};
use crate::schedule::NoiseSchedule;

/// Positive step sizes `softplus(rho_k)`, one per gradient-descent
/// iteration, shared across diffusion steps.
#[derive(Debug, Clone)]
pub struct StepSizes {
    rho: Tensor,
    count: usize,
}

impl StepSizes {
    pub fn new(store: &mut ParamStore, init: f64, count: usize) -> Result<Self> {
        if !(init > 0.0 && init.is_finite()) {
            return Err(DimoError::Config(format!("initial step size {init} must be positive")));
        }
        // inverse softplus; zero iterations still keep a placeholder entry
        let rho = store.constant(&format!("{STEP_SIZE_PREFIX}rho"), &[count.max(1)], init.exp_m1().ln())?;
        Ok(Self { rho, count })
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Differentiable step sizes, shape `(max(K, 1),)`.
    pub fn values(&self) -> Result<Tensor> {
        Ok((self.rho.exp()? + 1.0)?.log()?)
    }

    /// Step size `k` as a `(1, 1, 1, 1)` tensor for broadcasting.
    pub fn value(&self, k: usize) -> Result<Tensor> {
        Ok(self.values()?.narrow(0, k, 1)?.reshape((1, 1, 1, 1))?)
    }

    pub fn to_vec(&self) -> Result<Vec<f64>> {
        let rho: Vec<f32> = self.rho.to_vec1()?;
        Ok(rho.iter().take(self.count).map(|r| (*r as f64).exp().ln_1p()).collect())
    }
}

/// U-Net plus step sizes, backed by one parameter store.
#[derive(Debug)]
pub struct DiffusionNet {
    store: ParamStore,
    unet: UNet,
    step_sizes: StepSizes,
    prior: Option<GaussianPrior>,
}

impl DiffusionNet {
    pub fn new(config: UNetConfig, gd_steps: usize, step_init: f64, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(seed);
        let unet = UNet::new(&mut store, config)?;
        let step_sizes = StepSizes::new(&mut store, step_init, gd_steps)?;
        Ok(Self { store, unet, step_sizes, prior: None })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn unet(&self) -> &UNet {
        &self.unet
    }

    pub fn config(&self) -> &UNetConfig {
        self.unet.config()
    }

    pub fn step_sizes(&self) -> &StepSizes {
        &self.step_sizes
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn prior(&self) -> Option<&GaussianPrior> {
        self.prior.as_ref()
    }

    pub fn set_prior(&mut self, prior: GaussianPrior) {
        self.prior = Some(prior);
    }

    /// Noise prediction `skip_t(x_t) + unet(x_t, t)`, where `skip_t` is the
    /// posterior-mean noise under the Gaussian prior (standard normal when
    /// none is set). The U-Net learns the residual.
    pub fn predict_noise_skip(&self, xt: &Tensor, steps: &[usize], schedule: &NoiseSchedule) -> Result<Tensor> {
        let b = steps.len();
        let mut sqrt_ab = Vec::with_capacity(b);
        let mut ab = Vec::with_capacity(b);
        let mut oma = Vec::with_capacity(b);
        for &t in steps {
            schedule.check_step(t)?;
            sqrt_ab.push(schedule.alpha_bar(t).sqrt() as f32);
            ab.push(schedule.alpha_bar(t) as f32);
            oma.push(schedule.one_minus_alpha_bar(t) as f32);
        }
        let column = |v: Vec<f32>| Tensor::from_vec(v, (b, 1, 1, 1), self.device());
        let sqrt_oma = column(oma.iter().map(|v| v.sqrt()).collect())?;
        let skip = match &self.prior {
            None => xt.broadcast_mul(&sqrt_oma)?,
            Some(p) => {
                let centered = xt.broadcast_sub(&column(sqrt_ab)?.broadcast_mul(&p.mean.unsqueeze(0)?)?)?;
                let denom = column(ab)?.broadcast_mul(&p.var.unsqueeze(0)?)?.broadcast_add(&column(oma)?)?;
                centered.broadcast_mul(&sqrt_oma)?.div(&denom)?
            }
        };
        Ok((self.unet.predict_noise(xt, steps)? + skip)?)
    }
}

/// Element-wise Gaussian model `N(mean, var)` of clean samples in network
/// units, shape `(C, H, W)`.
#[derive(Debug, Clone)]
pub struct GaussianPrior {
    mean: Tensor,
    var: Tensor,
}

impl GaussianPrior {
    pub const MEAN_KEY: &'static str = "prior.mean";
    pub const VAR_KEY: &'static str = "prior.var";

    pub fn new(mean: Tensor, var: Tensor) -> Result<Self> {
        if mean.dims() != var.dims() || mean.rank() != 3 {
            return Err(DimoError::Shape(format!("prior mean {:?} and variance {:?}", mean.dims(), var.dims())));
        }
        Ok(Self { mean, var })
    }

    /// Sample mean and variance over the batch axis of `(N, C, H, W)`
    /// clean data; the variance is floored at `var_floor`.
    pub fn fit(clean: &Tensor, var_floor: f64) -> Result<Self> {
        let mean = clean.mean(0)?;
        let var = clean.broadcast_sub(&mean.unsqueeze(0)?)?.sqr()?.mean(0)?.clamp(var_floor, f64::INFINITY)?;
        Self::new(mean, var)
    }

    pub fn mean(&self) -> &Tensor {
        &self.mean
    }

    pub fn var(&self) -> &Tensor {
        &self.var
    }
}

impl NoisePredictor for DiffusionNet {
    fn predict_noise(&self, xt: &Tensor, steps: &[usize]) -> Result<Tensor> {
        self.unet.predict_noise(xt, steps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_sizes_start_at_init() {
        let mut store = ParamStore::new(0);
        let s = StepSizes::new(&mut store, 1e-4, 3).unwrap();
        for v in s.to_vec().unwrap() {
            assert!((v - 1e-4).abs() / 1e-4 < 1e-3, "{v}");
        }
        let t: Vec<f32> = s.values().unwrap().to_vec1().unwrap();
        assert!(t.iter().all(|v| (*v as f64 - 1e-4).abs() / 1e-4 < 1e-2));
        assert!(StepSizes::new(&mut ParamStore::new(0), 0.0, 2).is_err());
        let empty = StepSizes::new(&mut ParamStore::new(0), 0.5, 0).unwrap();
        assert!(empty.is_empty() && empty.to_vec().unwrap().is_empty());
    }
}
