//! Diffusion directly on multi-coil k-space, guided at every step by
//! data-consistency blending and gradient descent on the data fidelity.

use std::path::Path;
use std::sync::Arc;

use candle_core::Tensor;
use ndarray::{Array3, Zip};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DimoError, Result};
use crate::metrics::percentile;
use crate::mri::{data_consistency_in_place, kspace_normal, kspace_rhs, ForwardModel, KSpace};
use crate::net::physics::{
    complex_batch_to_tensor, tensor_to_complex_batch, BatchedOperator, KspaceNormal, SelfAdjoint,
};
use crate::net::{
    load_checkpoint, save_checkpoint, training_loss, Adam, AdamConfig, CheckpointMeta, DiffusionNet, GaussianPrior,
    Normalization, TrainingState, UNetConfig, CHECKPOINT_FORMAT,
};
use crate::schedule::{
    complex_standard_normal, forward_diffuse, reverse_step_mean, DcSchedule, NoiseSchedule, ScheduleConfig,
};

/// Encoding operator and zero-filled measurement of one slice.
#[derive(Clone)]
pub struct StaticAcquisition {
    operator: Arc<KspaceNormal>,
    measured: KSpace,
    rhs: Array3<Complex64>,
}

impl StaticAcquisition {
    pub fn new(model: ForwardModel, measured: KSpace) -> Result<Self> {
        if model.kspace_dim() != measured.dim() {
            return Err(DimoError::Shape(format!(
                "measured {:?} vs operator {:?}",
                measured.dim(),
                model.kspace_dim()
            )));
        }
        for coil in measured.data().outer_iter() {
            if Zip::from(&coil).and(model.mask().mask()).any(|v, &m| !m && v.norm() != 0.0) {
                return Err(DimoError::Data("measured k-space is nonzero outside the mask".into()));
            }
        }
        let rhs = kspace_rhs(&model, &measured)?;
        Ok(Self { operator: Arc::new(KspaceNormal(model)), measured, rhs })
    }

    /// Measurement `mask * fhat0` of a fully sampled slice.
    pub fn retrospective(model: ForwardModel, fhat0: &KSpace) -> Result<Self> {
        let mut measured = fhat0.data().clone();
        for mut coil in measured.outer_iter_mut() {
            Zip::from(&mut coil).and(model.mask().mask()).for_each(|v, &m| {
                if !m {
                    *v = Complex64::new(0.0, 0.0);
                }
            });
        }
        Self::new(model, KSpace::new(measured)?)
    }

    pub fn model(&self) -> &ForwardModel {
        &self.operator.0
    }

    pub fn measured(&self) -> &KSpace {
        &self.measured
    }

    fn scaled(&self, factor: f64) -> Self {
        Self {
            operator: self.operator.clone(),
            measured: KSpace::new(self.measured.data() * Complex64::new(factor, 0.0))
                .expect("scaling keeps values finite"),
            rhs: &self.rhs * Complex64::new(factor, 0.0),
        }
    }

    /// `||P fhat - f|| / ||f||` over sampled bins.
    pub fn on_mask_residual(&self, fhat: &KSpace) -> Result<f64> {
        if fhat.dim() != self.measured.dim() {
            return Err(DimoError::Shape(format!("{:?} vs {:?}", fhat.dim(), self.measured.dim())));
        }
        let mask = self.model().mask().mask();
        let mut num = 0.0;
        for (est, meas) in fhat.data().outer_iter().zip(self.measured.data().outer_iter()) {
            Zip::from(&est).and(&meas).and(mask).for_each(|e, m, &s| {
                if s {
                    num += (e - m).norm_sqr();
                }
            });
        }
        let den = self.measured.norm();
        if den == 0.0 {
            return Err(DimoError::Data("measured k-space is identically zero".into()));
        }
        Ok(num.sqrt() / den)
    }
}

const PRIOR_VAR_FLOOR: f64 = 1e-8;

/// Schedules and step sizes shared by every slice.
#[derive(Debug, Clone)]
pub struct StaticGuidanceContext {
    pub noise_schedule: NoiseSchedule,
    pub dc_schedule: DcSchedule,
    pub step_sizes: Vec<f64>,
}

fn gradient_steps(x: &mut Array3<Complex64>, acq: &StaticAcquisition, step_sizes: &[f64]) -> Result<()> {
    for &eta in step_sizes {
        let normal = kspace_normal(acq.model(), &x.view())?;
        Zip::from(&mut *x).and(&normal).and(&acq.rhs).for_each(|x, n, b| *x -= (n - b) * eta);
    }
    Ok(())
}

fn guide_with(x: &mut Array3<Complex64>, lam: f64, acq: &StaticAcquisition, step_sizes: &[f64]) -> Result<()> {
    data_consistency_in_place(x, acq.measured.data(), acq.model().mask(), lam)?;
    gradient_steps(x, acq, step_sizes)
}

/// Data consistency with `lambda_t` followed by `K` gradient-descent steps
/// on `1/2 ||A S^H F^-1 fhat - f||^2`.
pub fn guide(fhat_t: &KSpace, t: usize, acq: &StaticAcquisition, ctx: &StaticGuidanceContext) -> Result<KSpace> {
    let lam = ctx.dc_schedule.lambda(t)?;
    let mut x = fhat_t.data().clone();
    guide_with(&mut x, lam, acq, &ctx.step_sizes)?;
    KSpace::new(x)
}

/// 99.9th percentile of `|fhat0|` over all coils and slices.
pub fn kspace_scale<'a>(slices: impl IntoIterator<Item = &'a KSpace>) -> Result<f64> {
    let mut mags: Vec<f64> = slices.into_iter().flat_map(|k| k.data().iter().map(|v| v.norm())).collect();
    let scale = percentile(&mut mags, 99.9)?;
    if !(scale > 0.0) {
        return Err(DimoError::Data("k-space scale is zero".into()));
    }
    Ok(scale)
}

#[derive(Clone)]
pub struct StaticTrainSample {
    pub fhat0: KSpace,
    pub acquisition: StaticAcquisition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticModelConfig {
    pub network: UNetConfig,
    pub schedule: ScheduleConfig,
    pub gd_steps: usize,
    pub step_size_init: f64,
    /// `false` trains a plain DDPM (no DC, no gradient steps).
    pub guidance: bool,
}

/// Network, optimizer and schedules of a static model.
pub struct StaticDimo {
    config: StaticModelConfig,
    net: DiffusionNet,
    adam: Adam,
    schedule: NoiseSchedule,
    dc: DcSchedule,
    scale: f64,
    seed: u64,
    epochs: u64,
    losses: Vec<f64>,
}

impl StaticDimo {
    pub fn new(config: StaticModelConfig, adam: AdamConfig, scale: f64, seed: u64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(DimoError::InvalidArgument(format!("normalization scale {scale} must be positive")));
        }
        let schedule = config.schedule.build()?;
        let dc = DcSchedule::new(config.schedule.steps)?;
        let net = DiffusionNet::new(config.network, config.gd_steps, config.step_size_init, seed)?;
        Ok(Self { config, net, adam: Adam::new(adam), schedule, dc, scale, seed, epochs: 0, losses: Vec::new() })
    }

    pub fn config(&self) -> &StaticModelConfig {
        &self.config
    }

    pub fn net(&self) -> &DiffusionNet {
        &self.net
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn epochs(&self) -> u64 {
        self.epochs
    }

    pub fn is_trained(&self) -> bool {
        self.adam.step_count() > 0
    }

    fn active_step_sizes(&self) -> Result<Vec<f64>> {
        if self.config.guidance {
            self.net.step_sizes().to_vec()
        } else {
            Ok(Vec::new())
        }
    }

    pub fn guidance_context(&self) -> Result<StaticGuidanceContext> {
        Ok(StaticGuidanceContext {
            noise_schedule: self.schedule.clone(),
            dc_schedule: self.dc.clone(),
            step_sizes: self.active_step_sizes()?,
        })
    }

    /// Fits the element-wise Gaussian prior of the normalized training
    /// k-space.
    pub fn fit_prior(&mut self, data: &[StaticTrainSample]) -> Result<()> {
        let inv = Complex64::new(1.0 / self.scale, 0.0);
        let scaled: Vec<Array3<Complex64>> = data.iter().map(|d| d.fhat0.data() * inv).collect();
        let clean = complex_batch_to_tensor(&scaled, &self.net.device().clone())?;
        self.net.set_prior(GaussianPrior::fit(&clean, PRIOR_VAR_FLOOR)?);
        Ok(())
    }

    /// One optimizer update on a batch; returns the batch loss.
    pub fn train_step(&mut self, batch: &[&StaticTrainSample], rng: &mut ChaCha8Rng) -> Result<f64> {
        if batch.is_empty() {
            return Err(DimoError::InvalidArgument("empty training batch".into()));
        }
        let inv = 1.0 / self.scale;
        let mut inputs = Vec::with_capacity(batch.len());
        let mut noises = Vec::with_capacity(batch.len());
        let mut rhs = Vec::with_capacity(batch.len());
        let mut ops: Vec<Arc<dyn SelfAdjoint>> = Vec::with_capacity(batch.len());
        let mut steps = Vec::with_capacity(batch.len());
        for item in batch {
            let t = rng.random_range(1..=self.schedule.steps());
            let eps = complex_standard_normal(item.fhat0.dim(), rng);
            let x0 = item.fhat0.data() * Complex64::new(inv, 0.0);
            let mut xt = forward_diffuse(&x0, t, &eps, &self.schedule)?;
            let acq = item.acquisition.scaled(inv);
            if self.config.guidance {
                data_consistency_in_place(&mut xt, acq.measured.data(), acq.model().mask(), self.dc.lambda(t)?)?;
            }
            inputs.push(xt);
            noises.push(eps);
            rhs.push(acq.rhs);
            ops.push(acq.operator);
            steps.push(t);
        }
        let device = self.net.device().clone();
        let mut x = complex_batch_to_tensor(&inputs, &device)?;
        if self.config.guidance && self.config.gd_steps > 0 {
            let op = BatchedOperator::new(ops);
            let rhs = complex_batch_to_tensor(&rhs, &device)?;
            for k in 0..self.config.gd_steps {
                let grad = (op.apply(&x)? - &rhs)?;
                x = (&x - grad.broadcast_mul(&self.net.step_sizes().value(k)?)?)?;
            }
        }
        let eps = complex_batch_to_tensor(&noises, &device)?;
        let loss = training_loss(&self.net.predict_noise_skip(&x, &steps, &self.schedule)?, &eps)?;
        let value = loss.to_scalar::<f32>()? as f64;
        self.adam.step(self.net.store(), &loss.backward()?)?;
        self.losses.push(value);
        Ok(value)
    }

    /// One shuffled pass over `data`; returns the mean batch loss.
    pub fn train_epoch(&mut self, data: &[StaticTrainSample], batch_size: usize) -> Result<f64> {
        let order = epoch_order(data.len(), batch_size, self.seed, self.epochs)?;
        let mut rng = epoch_rng(self.seed, self.epochs);
        let mut total = 0.0;
        let mut count = 0;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<&StaticTrainSample> = chunk.iter().map(|&i| &data[i]).collect();
            total += self.train_step(&batch, &mut rng)?;
            count += 1;
        }
        self.epochs += 1;
        Ok(total / count as f64)
    }

    /// Runs the guided reverse chain for every `(acquisition, seed)` job as
    /// one network batch.
    pub fn sample(&self, jobs: &[(&StaticAcquisition, u64)]) -> Result<Vec<KSpace>> {
        if jobs.is_empty() {
            return Ok(Vec::new());
        }
        let inv = 1.0 / self.scale;
        let step_sizes = self.active_step_sizes()?;
        let scaled: Vec<StaticAcquisition> = jobs.iter().map(|(a, _)| a.scaled(inv)).collect();
        let mut rngs: Vec<ChaCha8Rng> = jobs.iter().map(|(_, s)| ChaCha8Rng::seed_from_u64(*s)).collect();
        let mut states: Vec<Array3<Complex64>> =
            scaled.iter().zip(&mut rngs).map(|(a, rng)| complex_standard_normal(a.measured.dim(), rng)).collect();
        let device = self.net.device().clone();
        for t in (1..=self.schedule.steps()).rev() {
            let input = complex_batch_to_tensor(&states, &device)?;
            let pred = tensor_to_complex_batch(&self.net.predict_noise_skip(
                &input,
                &vec![t; states.len()],
                &self.schedule,
            )?)?;
            let lam = self.dc.sampling_lambda(t)?;
            let sigma = self.schedule.sigma(t);
            for ((x, eps), (acq, rng)) in states.iter_mut().zip(&pred).zip(scaled.iter().zip(&mut rngs)) {
                let mut next = reverse_step_mean(x, eps, t, &self.schedule)?;
                if t > 1 {
                    let z = complex_standard_normal(next.dim(), rng);
                    next.zip_mut_with(&z, |n, z| *n += z * sigma);
                }
                if self.config.guidance {
                    guide_with(&mut next, lam, acq, &step_sizes)?;
                }
                *x = next;
            }
        }
        states.into_iter().map(|x| KSpace::new(x * Complex64::new(self.scale, 0.0))).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            format: CHECKPOINT_FORMAT.into(),
            mode: "static".into(),
            network: self.config.network,
            schedule: self.config.schedule,
            gd_steps: self.config.gd_steps,
            guidance: self.config.guidance,
            step_size_init: self.config.step_size_init,
            step_sizes: self.net.step_sizes().to_vec()?,
            normalization: Normalization::Kspace { scale: self.scale },
            training: TrainingState {
                optimizer_steps: self.adam.step_count(),
                epochs: self.epochs,
                seed: self.seed,
                adam: *self.adam.config(),
                losses: self.losses.clone(),
            },
        };
        save_checkpoint(dir, &self.net, &self.adam, &meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (net, adam, meta) = load_checkpoint(dir)?;
        if meta.mode != "static" {
            return Err(DimoError::Data(format!("checkpoint holds a {} model", meta.mode)));
        }
        let Normalization::Kspace { scale } = meta.normalization else {
            return Err(DimoError::Data("static checkpoint lacks a k-space scale".into()));
        };
        let config = StaticModelConfig {
            network: meta.network,
            schedule: meta.schedule,
            gd_steps: meta.gd_steps,
            step_size_init: meta.step_size_init,
            guidance: meta.guidance,
        };
        Ok(Self {
            schedule: config.schedule.build()?,
            dc: DcSchedule::new(config.schedule.steps)?,
            config,
            net,
            adam,
            scale,
            seed: meta.training.seed,
            epochs: meta.training.epochs,
            losses: meta.training.losses,
        })
    }
}

/// Random generator for epoch `epoch`: one ChaCha stream per epoch, so a
/// resumed run draws exactly what an uninterrupted one would.
pub(crate) fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch + 1);
    rng
}

pub(crate) fn epoch_order(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<usize>> {
    use rand::seq::SliceRandom;
    if len == 0 || batch_size == 0 {
        return Err(DimoError::InvalidArgument(format!("cannot batch {len} samples by {batch_size}")));
    }
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0dde);
    rng.set_stream(epoch + 1);
    order.shuffle(&mut rng);
    Ok(order)
}

/// Converts a k-space batch tensor back to validated k-space.
pub fn tensor_to_kspace(t: &Tensor) -> Result<Vec<KSpace>> {
    tensor_to_complex_batch(t)?.into_iter().map(KSpace::new).collect()
}
