use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{DimoError, Result};
use crate::net::layers::{timestep_embedding, Conv1x1, Conv3x3, Dense, GroupNorm};
use crate::net::params::ParamStore;

/// Predicts the injected noise from a noisy channelized sample.
pub trait NoisePredictor {
    /// `xt` has shape `(B, C, H, W)`; `steps` holds one diffusion step per
    /// batch item.
    fn predict_noise(&self, xt: &Tensor, steps: &[usize]) -> Result<Tensor>;
}

/// Mean squared error between predicted and true noise.
pub fn training_loss(eps_pred: &Tensor, eps: &Tensor) -> Result<Tensor> {
    if eps_pred.dims() != eps.dims() {
        return Err(DimoError::Shape(format!("prediction {:?} vs noise {:?}", eps_pred.dims(), eps.dims())));
    }
    Ok((eps_pred - eps)?.sqr()?.mean_all()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub base_width: usize,
    pub depth: usize,
    pub time_embed_dim: usize,
}

impl UNetConfig {
    pub fn new(in_channels: usize, base_width: usize) -> Self {
        Self { in_channels, base_width, depth: 3, time_embed_dim: 128 }
    }

    /// Feature width at resolution level `level`; the bottleneck is level
    /// `depth`.
    pub fn width(&self, level: usize) -> usize {
        self.base_width << level.min(2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_width == 0 || self.depth == 0 || self.time_embed_dim < 2 {
            return Err(DimoError::Config(format!("invalid network configuration {self:?}")));
        }
        Ok(())
    }
}

/// Two GroupNorm-SiLU-conv stages with a time-embedding shift after the
/// first and a residual connection around both.
#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv3x3,
    time_proj: Dense,
    norm2: GroupNorm,
    conv2: Conv3x3,
    skip: Option<Conv1x1>,
}

impl ResBlock {
    fn new(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, temb: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), in_ch)?,
            conv1: Conv3x3::new(store, &format!("{name}.conv1"), in_ch, out_ch)?,
            time_proj: Dense::new(store, &format!("{name}.time"), temb, out_ch)?,
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), out_ch)?,
            conv2: Conv3x3::new(store, &format!("{name}.conv2"), out_ch, out_ch)?,
            skip: if in_ch == out_ch {
                None
            } else {
                Some(Conv1x1::new(store, &format!("{name}.skip"), in_ch, out_ch)?)
            },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let shift = self.time_proj.forward(temb)?;
        let (b, c) = shift.dims2()?;
        let h = h.broadcast_add(&shift.reshape((b, c, 1, 1))?)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let residual = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((h + residual)?)
    }
}

/// Time-conditioned U-Net with concatenation skips, average-pool
/// downsampling and nearest-neighbour upsampling.
#[derive(Debug, Clone)]
pub struct UNet {
    config: UNetConfig,
    time_in: Dense,
    time_out: Dense,
    input: Conv3x3,
    down: Vec<ResBlock>,
    mid: ResBlock,
    up: Vec<ResBlock>,
    out_norm: GroupNorm,
    output: Conv3x3,
    device: Device,
}

impl UNet {
    pub fn new(store: &mut ParamStore, config: UNetConfig) -> Result<Self> {
        config.validate()?;
        let temb = config.width(config.depth);
        let time_in = Dense::new(store, "unet.time.0", config.time_embed_dim, temb)?;
        let time_out = Dense::new(store, "unet.time.1", temb, temb)?;
        let input = Conv3x3::new(store, "unet.input", config.in_channels, config.width(0))?;
        let mut down = Vec::new();
        let mut prev = config.width(0);
        for level in 0..config.depth {
            down.push(ResBlock::new(store, &format!("unet.down{level}"), prev, config.width(level), temb)?);
            prev = config.width(level);
        }
        let mid = ResBlock::new(store, "unet.mid", prev, config.width(config.depth), temb)?;
        prev = config.width(config.depth);
        let mut up = Vec::new();
        for level in (0..config.depth).rev() {
            let skip = config.width(level);
            up.push(ResBlock::new(store, &format!("unet.up{level}"), prev + skip, skip, temb)?);
            prev = skip;
        }
        let out_norm = GroupNorm::new(store, "unet.out_norm", prev)?;
        let output = Conv3x3::zeros(store, "unet.output", prev, config.in_channels)?;
        Ok(Self { config, time_in, time_out, input, down, mid, up, out_norm, output, device: store.device().clone() })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    fn check_input(&self, xt: &Tensor, steps: &[usize]) -> Result<()> {
        let (b, c, h, w) = xt.dims4()?;
        let unit = 1usize << self.config.depth;
        if c != self.config.in_channels {
            return Err(DimoError::Shape(format!("expected {} channels, got {c}", self.config.in_channels)));
        }
        if h % unit != 0 || w % unit != 0 || h == 0 || w == 0 {
            return Err(DimoError::Shape(format!("spatial size {h}x{w} must be a nonzero multiple of {unit}")));
        }
        if steps.len() != b {
            return Err(DimoError::Shape(format!("{} steps for a batch of {b}", steps.len())));
        }
        Ok(())
    }
}

impl NoisePredictor for UNet {
    fn predict_noise(&self, xt: &Tensor, steps: &[usize]) -> Result<Tensor> {
        self.check_input(xt, steps)?;
        let emb = timestep_embedding(steps, self.config.time_embed_dim, &self.device)?;
        let temb = self.time_out.forward(&self.time_in.forward(&emb)?.silu()?)?.silu()?;

        let mut h = self.input.forward(xt)?;
        let mut skips = Vec::with_capacity(self.config.depth);
        for block in &self.down {
            h = block.forward(&h, &temb)?;
            skips.push(h.clone());
            h = h.avg_pool2d(2)?;
        }
        h = self.mid.forward(&h, &temb)?;
        for block in &self.up {
            let skip = skips.pop().expect("one skip per level");
            let (_, _, sh, sw) = skip.dims4()?;
            h = Tensor::cat(&[&h.upsample_nearest2d(sh, sw)?, &skip], 1)?;
            h = block.forward(&h, &temb)?;
        }
        self.output.forward(&self.out_norm.forward(&h)?.silu()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seeded(shape: (usize, usize, usize, usize), scale: f64, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        let data: Vec<f32> = (0..n).map(|_| rng.random_range(-scale..scale) as f32).collect();
        Tensor::from_vec(data, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn shape_is_preserved() {
        let mut store = ParamStore::new(0);
        let net = UNet::new(&mut store, UNetConfig::new(8, 8)).unwrap();
        let x = seeded((1, 8, 64, 64), 1.0, 1);
        let y = net.predict_noise(&x, &[17]).unwrap();
        assert_eq!(y.dims(), &[1, 8, 64, 64]);
        assert!(net.predict_noise(&seeded((1, 3, 64, 64), 1.0, 1), &[1]).is_err());
        assert!(net.predict_noise(&seeded((1, 8, 20, 20), 1.0, 1), &[1]).is_err());
        assert!(net.predict_noise(&x, &[1, 2]).is_err());
    }

    #[test]
    fn inference_is_deterministic_and_bounded() {
        let mut store = ParamStore::new(2);
        let net = UNet::new(&mut store, UNetConfig::new(3, 8)).unwrap();
        // the zero-initialized output layer would hide the bound, so perturb it
        for (name, var) in store.iter() {
            if name.starts_with("unet.output") {
                var.set(&seeded((1, 1, 1, var.elem_count()), 0.1, 3).reshape(var.dims()).unwrap()).unwrap();
            }
        }
        let x = seeded((2, 3, 16, 16), 10.0, 4);
        let a: Vec<f32> = net.predict_noise(&x, &[1, 200]).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = net.predict_noise(&x, &[1, 200]).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite() && v.abs() <= 1e4));
    }

    #[test]
    fn loss_is_zero_for_perfect_prediction() {
        let e = seeded((2, 3, 8, 8), 1.0, 5);
        let l = training_loss(&e, &e).unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(l, 0.0);
        let zeros = Tensor::zeros((2, 3, 8, 8), DType::F32, &Device::Cpu).unwrap();
        assert!(training_loss(&zeros, &seeded((2, 3, 8, 4), 1.0, 5)).is_err());
    }
}
