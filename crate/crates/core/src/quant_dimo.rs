//! Diffusion on T1 / proton-density maps, guided by quantitative data
//! consistency (signal model to k-space, blend, fit back) and gradient
//! descent through the signal model.

use std::path::Path;
use std::sync::Arc;

use candle_core::{Device, Tensor};
use ndarray::{Array2, Array3, Axis};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{DimoError, Result};
use crate::metrics::percentile;
use crate::mri::{coil_expand, data_consistency_in_place, reconstruct_image, KSpace};
use crate::net::physics::{complex_batch_to_tensor, AngleNormal, BatchedOperator, SelfAdjoint};
use crate::net::{
    load_checkpoint, save_checkpoint, training_loss, Adam, AdamConfig, CheckpointMeta, DiffusionNet, GaussianPrior,
    Normalization, TrainingState, UNetConfig, CHECKPOINT_FORMAT,
};
use crate::schedule::{forward_diffuse, reverse_step_mean, DcSchedule, NoiseSchedule, ScheduleConfig};
use crate::static_dimo::{epoch_order, epoch_rng};
use crate::vfa::{
    vfa_fidelity_grad, vfa_fit, vfa_forward, AcquisitionProtocol, FitSettings, MultiFlipAcquisition, MultiFlipImages,
    ParamMaps, VfaFit,
};

const PRIOR_VAR_FLOOR: f64 = 1e-4;

pub const PARAM_CHANNELS: usize = 3;

/// Linear map between physical parameters and the three diffusion
/// channels `(T1 / t1_scale, Re I0 / i0_scale, Im I0 / i0_scale)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelScaling {
    pub t1_scale: f64,
    pub i0_scale: f64,
}

impl ChannelScaling {
    pub fn new(t1_scale: f64, i0_scale: f64) -> Result<Self> {
        if !(t1_scale > 0.0 && i0_scale > 0.0 && t1_scale.is_finite() && i0_scale.is_finite()) {
            return Err(DimoError::InvalidArgument(format!("channel scales {t1_scale}, {i0_scale} must be positive")));
        }
        Ok(Self { t1_scale, i0_scale })
    }

    /// T1 over 3 s and I0 over the 99th percentile of `|I0|` in `maps`.
    pub fn from_dataset<'a>(maps: impl IntoIterator<Item = &'a ParamMaps>) -> Result<Self> {
        let mut mags: Vec<f64> = maps.into_iter().flat_map(|m| m.i0().iter().map(|v| v.norm())).collect();
        Self::new(3.0, percentile(&mut mags, 99.0)?)
    }

    pub fn encode(&self, params: &ParamMaps) -> Array3<f64> {
        let (h, w) = params.dim();
        Array3::from_shape_fn((PARAM_CHANNELS, h, w), |(c, i, j)| match c {
            0 => params.t1()[[i, j]] / self.t1_scale,
            1 => params.i0()[[i, j]].re / self.i0_scale,
            _ => params.i0()[[i, j]].im / self.i0_scale,
        })
    }

    /// Inverse of [`encode`](Self::encode) with T1 clamped to the fit range.
    pub fn decode(&self, channels: &Array3<f64>, fit: &FitSettings) -> Result<ParamMaps> {
        let (c, h, w) = channels.dim();
        if c != PARAM_CHANNELS {
            return Err(DimoError::Shape(format!("expected {PARAM_CHANNELS} parameter channels, got {c}")));
        }
        let t1 = Array2::from_shape_fn((h, w), |(i, j)| {
            let v = channels[[0, i, j]] * self.t1_scale;
            if v.is_nan() {
                fit.t1_floor
            } else {
                v.clamp(fit.t1_floor, fit.t1_ceil)
            }
        });
        let i0 = Array2::from_shape_fn((h, w), |(i, j)| {
            Complex64::new(channels[[1, i, j]], channels[[2, i, j]]) * self.i0_scale
        });
        ParamMaps::new(t1, i0)
    }
}

/// Per-angle operators, measurements and protocol of one slice.
#[derive(Clone)]
pub struct QuantAcquisition {
    acquisition: Arc<MultiFlipAcquisition>,
    protocol: AcquisitionProtocol,
}

impl QuantAcquisition {
    pub fn new(acquisition: MultiFlipAcquisition, protocol: AcquisitionProtocol) -> Result<Self> {
        if acquisition.n_angles() != protocol.n_angles() {
            return Err(DimoError::Shape(format!(
                "{} acquisitions for {} flip angles",
                acquisition.n_angles(),
                protocol.n_angles()
            )));
        }
        let maps = acquisition.models()[0].coil_maps();
        if acquisition.models().iter().any(|m| m.coil_maps() != maps) {
            return Err(DimoError::Data("flip-angle acquisitions must share coil maps".into()));
        }
        Ok(Self { acquisition: Arc::new(acquisition), protocol })
    }

    pub fn acquisition(&self) -> &MultiFlipAcquisition {
        &self.acquisition
    }

    pub fn protocol(&self) -> &AcquisitionProtocol {
        &self.protocol
    }

    pub fn image_dim(&self) -> (usize, usize) {
        self.acquisition.image_dim()
    }

    /// `||P_i F S M_i(params) - f_i|| / ||f_i||` per angle.
    pub fn on_mask_residuals(&self, params: &ParamMaps) -> Result<Vec<f64>> {
        let imgs = vfa_forward(params, &self.protocol)?;
        let mut out = Vec::with_capacity(self.acquisition.n_angles());
        for (k, (model, f)) in self.acquisition.models().iter().zip(self.acquisition.kspace()).enumerate() {
            let pred = coil_expand(model.coil_maps(), &imgs.imgs().index_axis(Axis(0), k))?;
            let mut num = 0.0;
            for (p, m) in pred.outer_iter().zip(f.data().outer_iter()) {
                ndarray::Zip::from(&p).and(&m).and(model.mask().mask()).for_each(|p, m, &s| {
                    if s {
                        num += (p - m).norm_sqr();
                    }
                });
            }
            out.push(num.sqrt() / f.norm().max(f64::MIN_POSITIVE));
        }
        Ok(out)
    }
}

/// Zero-filled per-angle reconstructions followed by a pixel-wise fit.
pub fn zero_filled_fit(acq: &QuantAcquisition, fit: &FitSettings) -> Result<VfaFit> {
    let (h, w) = acq.image_dim();
    let mut imgs = Array3::zeros((acq.acquisition.n_angles(), h, w));
    for (k, (model, f)) in acq.acquisition.models().iter().zip(acq.acquisition.kspace()).enumerate() {
        imgs.index_axis_mut(Axis(0), k).assign(reconstruct_image(f, model.coil_maps())?.data());
    }
    vfa_fit(&MultiFlipImages::new(imgs)?, &acq.protocol, fit)
}

/// Schedules, step sizes and fit settings shared by every slice.
#[derive(Debug, Clone)]
pub struct QuantGuidanceContext {
    pub noise_schedule: NoiseSchedule,
    pub dc_schedule: DcSchedule,
    pub step_sizes: Vec<f64>,
    pub scaling: ChannelScaling,
    pub fit: FitSettings,
}

/// Quantitative data consistency with weight `lam`: channels to maps, maps
/// to per-angle multi-coil k-space, blend with the measurements, SENSE
/// combine and refit. Returns the channels and the fit validity mask.
pub fn qdc_with(
    delta: &Array3<f64>,
    lam: f64,
    acq: &QuantAcquisition,
    scaling: &ChannelScaling,
    fit: &FitSettings,
) -> Result<(Array3<f64>, Array2<bool>)> {
    let params = scaling.decode(delta, fit)?;
    let imgs = vfa_forward(&params, &acq.protocol)?;
    let (m, h, w) = imgs.imgs().dim();
    let mut combined = Array3::zeros((m, h, w));
    for (k, (model, f)) in acq.acquisition.models().iter().zip(acq.acquisition.kspace()).enumerate() {
        let mut fhat = coil_expand(model.coil_maps(), &imgs.imgs().index_axis(Axis(0), k))?;
        data_consistency_in_place(&mut fhat, f.data(), model.mask(), lam)?;
        let img = reconstruct_image(&KSpace::new(fhat)?, model.coil_maps())?;
        combined.index_axis_mut(Axis(0), k).assign(img.data());
    }
    let fitted = vfa_fit(&MultiFlipImages::new(combined)?, &acq.protocol, fit)?;
    Ok((scaling.encode(&fitted.params), fitted.valid))
}

/// [`qdc_with`] at the training weight `lambda_t`.
pub fn qdc(delta: &Array3<f64>, t: usize, acq: &QuantAcquisition, ctx: &QuantGuidanceContext) -> Result<Array3<f64>> {
    let lam = ctx.dc_schedule.lambda(t)?;
    Ok(qdc_with(delta, lam, acq, &ctx.scaling, &ctx.fit)?.0)
}

/// Gradient-descent steps on the summed per-angle fidelity in channel
/// space. T1 updates are dropped where the unclamped T1 leaves the fit range.
pub fn param_gradient_steps(
    delta: &mut Array3<f64>,
    acq: &QuantAcquisition,
    scaling: &ChannelScaling,
    fit: &FitSettings,
    step_sizes: &[f64],
) -> Result<()> {
    for &tau in step_sizes {
        let params = scaling.decode(delta, fit)?;
        let g = vfa_fidelity_grad(&params, &acq.acquisition, &acq.protocol)?;
        let (_, h, w) = delta.dim();
        for i in 0..h {
            for j in 0..w {
                let raw_t1 = delta[[0, i, j]] * scaling.t1_scale;
                if raw_t1 >= fit.t1_floor && raw_t1 <= fit.t1_ceil {
                    delta[[0, i, j]] -= tau * g.t1[[i, j]] * scaling.t1_scale;
                }
                delta[[1, i, j]] -= tau * g.i0[[i, j]].re * scaling.i0_scale;
                delta[[2, i, j]] -= tau * g.i0[[i, j]].im * scaling.i0_scale;
            }
        }
    }
    Ok(())
}

/// QDC followed by `K` gradient steps.
pub fn quant_guide(
    delta_t: &Array3<f64>,
    t: usize,
    acq: &QuantAcquisition,
    ctx: &QuantGuidanceContext,
) -> Result<Array3<f64>> {
    let mut out = qdc(delta_t, t, acq, ctx)?;
    param_gradient_steps(&mut out, acq, &ctx.scaling, &ctx.fit, &ctx.step_sizes)?;
    Ok(out)
}

/// Per-item signal-model constants for the differentiable gradient steps.
struct AngleTables {
    sin: Tensor,
    cos: Tensor,
}

fn angle_tables(items: &[&QuantAcquisition], device: &Device) -> Result<AngleTables> {
    let m = items[0].protocol.n_angles();
    let (h, w) = items[0].image_dim();
    let mut sin = Vec::with_capacity(items.len() * m * h * w);
    let mut cos = Vec::with_capacity(items.len() * m * h * w);
    for acq in items {
        if acq.protocol.n_angles() != m || acq.image_dim() != (h, w) {
            return Err(DimoError::Shape("batch items disagree on flip angles or image size".into()));
        }
        for k in 0..m {
            for i in 0..h {
                for j in 0..w {
                    let phi = acq.protocol.effective_angle(k, i, j);
                    sin.push(phi.sin() as f32);
                    cos.push(phi.cos() as f32);
                }
            }
        }
    }
    let shape = (items.len(), m, h, w);
    Ok(AngleTables { sin: Tensor::from_vec(sin, shape, device)?, cos: Tensor::from_vec(cos, shape, device)? })
}

/// Differentiable counterpart of [`param_gradient_steps`] on a
/// `(B, 3, H, W)` tensor.
#[allow(clippy::too_many_arguments)]
fn param_gradient_steps_tensor(
    x: Tensor,
    op: &BatchedOperator,
    adjoint_data: &Tensor,
    tables: &AngleTables,
    tr: f64,
    scaling: &ChannelScaling,
    fit: &FitSettings,
    net: &DiffusionNet,
    steps: usize,
) -> Result<Tensor> {
    let (b, _, h, w) = x.dims4()?;
    let m = tables.sin.dim(1)?;
    let mut x = x;
    for k in 0..steps {
        let t1 = (x.narrow(1, 0, 1)? * scaling.t1_scale)?.clamp(fit.t1_floor, fit.t1_ceil)?;
        let re = (x.narrow(1, 1, 1)? * scaling.i0_scale)?;
        let im = (x.narrow(1, 2, 1)? * scaling.i0_scale)?;
        let e1 = (t1.recip()? * -tr)?.exp()?;
        let denom = (1.0 - tables.cos.broadcast_mul(&e1)?)?;
        let g = (tables.sin.broadcast_mul(&(1.0 - &e1)?)? / &denom)?;
        let d_e1 = (&e1 * tr)?.div(&t1.sqr()?)?;
        let dg = (tables.sin.clone() * (&tables.cos - 1.0)?)?.div(&denom.sqr()?)?.broadcast_mul(&d_e1)?;
        let m_re = g.broadcast_mul(&re)?;
        let m_im = g.broadcast_mul(&im)?;
        let imgs = Tensor::stack(&[&m_re, &m_im], 2)?.reshape((b, 2 * m, h, w))?;
        let resid = (op.apply(&imgs)? - adjoint_data)?.reshape((b, m, 2, h, w))?;
        let r_re = resid.narrow(2, 0, 1)?.squeeze(2)?;
        let r_im = resid.narrow(2, 1, 1)?.squeeze(2)?;
        let g_t1 = ((r_re.broadcast_mul(&re)? + r_im.broadcast_mul(&im)?)? * dg)?.sum_keepdim(1)?;
        let g_re = (&r_re * &g)?.sum_keepdim(1)?;
        let g_im = (&r_im * &g)?.sum_keepdim(1)?;
        let grad =
            Tensor::cat(&[&(g_t1 * scaling.t1_scale)?, &(g_re * scaling.i0_scale)?, &(g_im * scaling.i0_scale)?], 1)?;
        x = (&x - grad.broadcast_mul(&net.step_sizes().value(k)?)?)?;
    }
    Ok(x)
}

fn real_normal(shape: (usize, usize, usize), rng: &mut ChaCha8Rng) -> Array3<f64> {
    Array3::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

fn real_batch_to_tensor(batch: &[Array3<f64>], device: &Device) -> Result<Tensor> {
    let (c, h, w) = batch[0].dim();
    let data: Vec<f32> = batch.iter().flat_map(|x| x.iter().map(|v| *v as f32)).collect();
    Ok(Tensor::from_vec(data, (batch.len(), c, h, w), device)?)
}

fn tensor_to_real_batch(t: &Tensor) -> Result<Vec<Array3<f64>>> {
    let (b, c, h, w) = t.dims4()?;
    let data: Vec<f32> = t.flatten_all()?.to_vec1()?;
    let item = c * h * w;
    (0..b)
        .map(|k| {
            Array3::from_shape_vec((c, h, w), data[k * item..(k + 1) * item].iter().map(|v| *v as f64).collect())
                .map_err(|e| DimoError::Shape(e.to_string()))
        })
        .collect()
}

#[derive(Clone)]
pub struct QuantTrainSample {
    /// Ground-truth maps from a fit to fully sampled images.
    pub params: ParamMaps,
    pub acquisition: QuantAcquisition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantModelConfig {
    pub network: UNetConfig,
    pub schedule: ScheduleConfig,
    pub gd_steps: usize,
    pub step_size_init: f64,
    pub guidance: bool,
    pub fit: FitSettings,
}

/// Output of the quantitative sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantSample {
    pub params: ParamMaps,
    pub valid: Array2<bool>,
}

pub struct QuantDimo {
    config: QuantModelConfig,
    net: DiffusionNet,
    adam: Adam,
    schedule: NoiseSchedule,
    dc: DcSchedule,
    scaling: ChannelScaling,
    seed: u64,
    epochs: u64,
    losses: Vec<f64>,
}

impl QuantDimo {
    pub fn new(config: QuantModelConfig, adam: AdamConfig, scaling: ChannelScaling, seed: u64) -> Result<Self> {
        if config.network.in_channels != PARAM_CHANNELS {
            return Err(DimoError::Config(format!("quantitative network needs {PARAM_CHANNELS} input channels")));
        }
        let schedule = config.schedule.build()?;
        let dc = DcSchedule::new(config.schedule.steps)?;
        let net = DiffusionNet::new(config.network, config.gd_steps, config.step_size_init, seed)?;
        Ok(Self { config, net, adam: Adam::new(adam), schedule, dc, scaling, seed, epochs: 0, losses: Vec::new() })
    }

    pub fn config(&self) -> &QuantModelConfig {
        &self.config
    }

    pub fn net(&self) -> &DiffusionNet {
        &self.net
    }

    pub fn scaling(&self) -> &ChannelScaling {
        &self.scaling
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

    pub fn guidance_context(&self) -> Result<QuantGuidanceContext> {
        Ok(QuantGuidanceContext {
            noise_schedule: self.schedule.clone(),
            dc_schedule: self.dc.clone(),
            step_sizes: self.active_step_sizes()?,
            scaling: self.scaling,
            fit: self.config.fit,
        })
    }

    /// Fits the element-wise Gaussian prior of the encoded training maps.
    pub fn fit_prior(&mut self, data: &[QuantTrainSample]) -> Result<()> {
        let encoded: Vec<Array3<f64>> = data.iter().map(|d| self.scaling.encode(&d.params)).collect();
        let clean = real_batch_to_tensor(&encoded, &self.net.device().clone())?;
        self.net.set_prior(GaussianPrior::fit(&clean, PRIOR_VAR_FLOOR)?);
        Ok(())
    }

    pub fn train_step(&mut self, batch: &[&QuantTrainSample], rng: &mut ChaCha8Rng) -> Result<f64> {
        if batch.is_empty() {
            return Err(DimoError::InvalidArgument("empty training batch".into()));
        }
        let mut inputs = Vec::with_capacity(batch.len());
        let mut noises = Vec::with_capacity(batch.len());
        let mut steps = Vec::with_capacity(batch.len());
        for item in batch {
            let t = rng.random_range(1..=self.schedule.steps());
            let x0 = self.scaling.encode(&item.params);
            let eps = real_normal(x0.dim(), rng);
            let mut xt = forward_diffuse(&x0, t, &eps, &self.schedule)?;
            if self.config.guidance {
                xt = qdc_with(&xt, self.dc.lambda(t)?, &item.acquisition, &self.scaling, &self.config.fit)?.0;
            }
            inputs.push(xt);
            noises.push(eps);
            steps.push(t);
        }
        let device = self.net.device().clone();
        let mut x = real_batch_to_tensor(&inputs, &device)?;
        if self.config.guidance && self.config.gd_steps > 0 {
            let acqs: Vec<&QuantAcquisition> = batch.iter().map(|b| &b.acquisition).collect();
            let ops: Vec<Arc<dyn SelfAdjoint>> =
                acqs.iter().map(|a| Arc::new(AngleNormal(a.acquisition.clone())) as Arc<dyn SelfAdjoint>).collect();
            let adjoint: Vec<Array3<Complex64>> = acqs.iter().map(|a| a.acquisition.adjoint_data().clone()).collect();
            let adjoint = complex_batch_to_tensor(&adjoint, &device)?;
            let tables = angle_tables(&acqs, &device)?;
            let tr = acqs[0].protocol.tr();
            if acqs.iter().any(|a| a.protocol.tr() != tr) {
                return Err(DimoError::Data("batch items disagree on TR".into()));
            }
            x = param_gradient_steps_tensor(
                x,
                &BatchedOperator::new(ops),
                &adjoint,
                &tables,
                tr,
                &self.scaling,
                &self.config.fit,
                &self.net,
                self.config.gd_steps,
            )?;
        }
        let eps = real_batch_to_tensor(&noises, &device)?;
        let loss = training_loss(&self.net.predict_noise_skip(&x, &steps, &self.schedule)?, &eps)?;
        let value = loss.to_scalar::<f32>()? as f64;
        self.adam.step(self.net.store(), &loss.backward()?)?;
        self.losses.push(value);
        Ok(value)
    }

    pub fn train_epoch(&mut self, data: &[QuantTrainSample], batch_size: usize) -> Result<f64> {
        let order = epoch_order(data.len(), batch_size, self.seed, self.epochs)?;
        let mut rng = epoch_rng(self.seed, self.epochs);
        let mut total = 0.0;
        let mut count = 0;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<&QuantTrainSample> = chunk.iter().map(|&i| &data[i]).collect();
            total += self.train_step(&batch, &mut rng)?;
            count += 1;
        }
        self.epochs += 1;
        Ok(total / count as f64)
    }

    /// Runs the guided reverse chain for every `(acquisition, seed)` job as
    /// one network batch.
    pub fn sample(&self, jobs: &[(&QuantAcquisition, u64)]) -> Result<Vec<QuantSample>> {
        if jobs.is_empty() {
            return Ok(Vec::new());
        }
        let step_sizes = self.active_step_sizes()?;
        let fit = self.config.fit;
        let mut rngs: Vec<ChaCha8Rng> = jobs.iter().map(|(_, s)| ChaCha8Rng::seed_from_u64(*s)).collect();
        let mut states: Vec<Array3<f64>> = jobs
            .iter()
            .zip(&mut rngs)
            .map(|((a, _), rng)| {
                let (h, w) = a.image_dim();
                real_normal((PARAM_CHANNELS, h, w), rng)
            })
            .collect();
        let mut valid: Vec<Option<Array2<bool>>> = vec![None; jobs.len()];
        let device = self.net.device().clone();
        for t in (1..=self.schedule.steps()).rev() {
            let input = real_batch_to_tensor(&states, &device)?;
            let pred =
                tensor_to_real_batch(&self.net.predict_noise_skip(&input, &vec![t; states.len()], &self.schedule)?)?;
            let lam = self.dc.sampling_lambda(t)?;
            let sigma = self.schedule.sigma(t);
            for (k, (x, eps)) in states.iter_mut().zip(&pred).enumerate() {
                let mut next = reverse_step_mean(x, eps, t, &self.schedule)?;
                if t > 1 {
                    let z = real_normal(next.dim(), &mut rngs[k]);
                    next.scaled_add(sigma, &z);
                }
                if self.config.guidance {
                    let (fitted, ok) = qdc_with(&next, lam, jobs[k].0, &self.scaling, &fit)?;
                    next = fitted;
                    param_gradient_steps(&mut next, jobs[k].0, &self.scaling, &fit, &step_sizes)?;
                    valid[k] = Some(ok);
                }
                *x = next;
            }
        }
        states
            .iter()
            .zip(valid)
            .map(|(x, ok)| {
                let params = self.scaling.decode(x, &fit)?;
                let valid = ok.unwrap_or_else(|| {
                    Array2::from_shape_fn(params.dim(), |(i, j)| {
                        let raw = x[[0, i, j]] * self.scaling.t1_scale;
                        raw > fit.t1_floor && raw < fit.t1_ceil
                    })
                });
                Ok(QuantSample { params, valid })
            })
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            format: CHECKPOINT_FORMAT.into(),
            mode: "quant".into(),
            network: self.config.network,
            schedule: self.config.schedule,
            gd_steps: self.config.gd_steps,
            guidance: self.config.guidance,
            step_size_init: self.config.step_size_init,
            step_sizes: self.net.step_sizes().to_vec()?,
            normalization: Normalization::Params { t1_scale: self.scaling.t1_scale, i0_scale: self.scaling.i0_scale },
            training: TrainingState {
                optimizer_steps: self.adam.step_count(),
                epochs: self.epochs,
                seed: self.seed,
                adam: *self.adam.config(),
                losses: self.losses.clone(),
            },
        };
        save_checkpoint(dir, &self.net, &self.adam, &meta)?;
        std::fs::write(dir.join("fit.json"), serde_json::to_string_pretty(&self.config.fit)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (net, adam, meta) = load_checkpoint(dir)?;
        if meta.mode != "quant" {
            return Err(DimoError::Data(format!("checkpoint holds a {} model", meta.mode)));
        }
        let Normalization::Params { t1_scale, i0_scale } = meta.normalization else {
            return Err(DimoError::Data("quantitative checkpoint lacks parameter scales".into()));
        };
        let fit: FitSettings = serde_json::from_str(&std::fs::read_to_string(dir.join("fit.json"))?)?;
        let config = QuantModelConfig {
            network: meta.network,
            schedule: meta.schedule,
            gd_steps: meta.gd_steps,
            step_size_init: meta.step_size_init,
            guidance: meta.guidance,
            fit,
        };
        Ok(Self {
            schedule: config.schedule.build()?,
            dc: DcSchedule::new(config.schedule.steps)?,
            config,
            net,
            adam,
            scaling: ChannelScaling::new(t1_scale, i0_scale)?,
            seed: meta.training.seed,
            epochs: meta.training.epochs,
            losses: meta.training.losses,
        })
    }
}
