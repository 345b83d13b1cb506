//! DDPM noise schedule, forward diffusion, posterior statistics and the
//! exponential data-consistency schedule.
//!
//! Steps are 1-based: `t` runs over `1..=T`, and the `t = 0` slot of the
//! cumulative product holds `alpha_bar_0 = 1`.

use ndarray::{Array, Dimension};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{check_step, DimoError, Result};

/// Anything the diffusion chain can run on: real or complex arrays, or
/// plain scalars.
pub trait DomainSample: Sized {
    /// `a * x + b * y`.
    fn lincomb(a: f64, x: &Self, b: f64, y: &Self) -> Result<Self>;
}

impl DomainSample for f64 {
    fn lincomb(a: f64, x: &Self, b: f64, y: &Self) -> Result<Self> {
        Ok(a * x + b * y)
    }
}

impl<D: Dimension> DomainSample for Array<f64, D> {
    fn lincomb(a: f64, x: &Self, b: f64, y: &Self) -> Result<Self> {
        if x.shape() != y.shape() {
            return Err(DimoError::Shape(format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        let mut out = x * a;
        out.scaled_add(b, y);
        Ok(out)
    }
}

impl<D: Dimension> DomainSample for Array<Complex64, D> {
    fn lincomb(a: f64, x: &Self, b: f64, y: &Self) -> Result<Self> {
        if x.shape() != y.shape() {
            return Err(DimoError::Shape(format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        let mut out = x.mapv(|v| v * a);
        out.zip_mut_with(y, |o, v| *o += v * b);
        Ok(out)
    }
}

/// Schedule hyperparameters as they appear in experiment configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    one_minus_alpha_bars: Vec<f64>,
    posterior_vars: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas linearly spaced from `beta_start` to `beta_end`, endpoints
    /// included.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(DimoError::InvalidArgument(format!("need at least 2 steps, got {steps}")));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(DimoError::InvalidArgument(format!(
                "beta range must satisfy 0 < {beta_start} <= {beta_end} < 1"
            )));
        }
        let betas: Vec<f64> =
            (0..steps).map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64).collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 || betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(DimoError::InvalidArgument("betas must lie in (0, 1)".into()));
        }
        if betas.windows(2).any(|w| w[1] < w[0]) {
            return Err(DimoError::InvalidArgument("betas must be non-decreasing".into()));
        }
        let steps = betas.len();
        let mut alpha_bars = Vec::with_capacity(steps + 1);
        let mut one_minus = Vec::with_capacity(steps + 1);
        alpha_bars.push(1.0);
        one_minus.push(0.0);
        // log-space accumulation keeps 1 - alpha_bar accurate for tiny betas
        let mut log_ab = 0.0f64;
        for (i, b) in betas.iter().enumerate() {
            log_ab += (-b).ln_1p();
            alpha_bars.push(log_ab.exp());
            // 1 - alpha_bar_1 is beta_1 by definition
            one_minus.push(if i == 0 { *b } else { -log_ab.exp_m1() });
        }
        let mut posterior_vars = Vec::with_capacity(steps + 1);
        posterior_vars.push(0.0);
        for t in 1..=steps {
            posterior_vars.push(betas[t - 1] * one_minus[t - 1] / one_minus[t]);
        }
        Ok(Self { betas, alpha_bars, one_minus_alpha_bars: one_minus, posterior_vars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    /// Cumulative product of alphas; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn one_minus_alpha_bar(&self, t: usize) -> f64 {
        self.one_minus_alpha_bars[t]
    }

    /// `sigma_t^2 = beta_t (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)`.
    pub fn posterior_var(&self, t: usize) -> f64 {
        self.posterior_vars[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.posterior_vars[t].sqrt()
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        check_step(t, self.steps())
    }

    /// `(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t))`.
    pub fn forward_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        self.check_step(t)?;
        Ok((self.alpha_bar(t).sqrt(), self.one_minus_alpha_bar(t).sqrt()))
    }

    /// Coefficients of `x_t` and `x_0` in the posterior mean.
    pub fn posterior_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        self.check_step(t)?;
        let denom = self.one_minus_alpha_bar(t);
        let c_xt = self.alpha(t).sqrt() * self.one_minus_alpha_bar(t - 1) / denom;
        let c_x0 = self.alpha_bar(t - 1).sqrt() * self.beta(t) / denom;
        Ok((c_xt, c_x0))
    }

    /// `(1 / sqrt(alpha_t), -beta_t / (sqrt(alpha_t) sqrt(1 - alpha_bar_t)))`,
    /// the coefficients of `x_t` and the predicted noise in the reverse mean.
    pub fn reverse_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        self.check_step(t)?;
        let inv_sqrt_alpha = 1.0 / self.alpha(t).sqrt();
        Ok((inv_sqrt_alpha, -inv_sqrt_alpha * self.beta(t) / self.one_minus_alpha_bar(t).sqrt()))
    }
}

/// Complex array whose real and imaginary parts are independent standard
/// normals, matching unit variance per real channel.
pub fn complex_standard_normal<D: Dimension, Sh: ndarray::ShapeBuilder<Dim = D>, R: rand::Rng>(
    shape: Sh,
    rng: &mut R,
) -> Array<Complex64, D> {
    Array::from_shape_simple_fn(shape, || {
        let re: f64 = rng.sample(rand_distr::StandardNormal);
        let im: f64 = rng.sample(rand_distr::StandardNormal);
        Complex64::new(re, im)
    })
}

/// `sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_diffuse<S: DomainSample>(x0: &S, t: usize, eps: &S, sched: &NoiseSchedule) -> Result<S> {
    let (a, b) = sched.forward_coefficients(t)?;
    S::lincomb(a, x0, b, eps)
}

/// Mean of `q(x_{t-1} | x_t, x_0)`.
pub fn posterior_mean<S: DomainSample>(xt: &S, x0: &S, t: usize, sched: &NoiseSchedule) -> Result<S> {
    let (a, b) = sched.posterior_coefficients(t)?;
    S::lincomb(a, xt, b, x0)
}

/// Noise-parameterized reverse mean
/// `(x_t - beta_t / sqrt(1 - alpha_bar_t) eps_pred) / sqrt(alpha_t)`.
/// The caller adds `sigma_t z` for `t > 1`.
pub fn reverse_step_mean<S: DomainSample>(xt: &S, eps_pred: &S, t: usize, sched: &NoiseSchedule) -> Result<S> {
    let (a, b) = sched.reverse_coefficients(t)?;
    S::lincomb(a, xt, b, eps_pred)
}

/// `lambda_t = exp(-(t - 1) / (T / 10))`.
pub fn lambda_at(t: usize, total: usize) -> Result<f64> {
    check_step(t, total)?;
    Ok((-((t - 1) as f64) / (total as f64 / 10.0)).exp())
}

/// Precomputed data-consistency weights `lambda_1..lambda_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct DcSchedule {
    values: Vec<f64>,
}

impl DcSchedule {
    pub fn new(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(DimoError::InvalidArgument("DC schedule needs at least one step".into()));
        }
        let values = (1..=steps).map(|t| lambda_at(t, steps)).collect::<Result<_>>()?;
        Ok(Self { values })
    }

    pub fn steps(&self) -> usize {
        self.values.len()
    }

    /// Weight used while training at step `t`.
    pub fn lambda(&self, t: usize) -> Result<f64> {
        check_step(t, self.values.len())?;
        Ok(self.values[t - 1])
    }

    /// Weight applied after the reverse step out of `t`: `lambda_{t-1}`, with
    /// the undefined `lambda_0` clamped to `lambda_1 = 1`.
    pub fn sampling_lambda(&self, t: usize) -> Result<f64> {
        check_step(t, self.values.len())?;
        Ok(self.values[t.saturating_sub(1).max(1) - 1])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}
