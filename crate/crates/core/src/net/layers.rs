use candle_core::{Device, Tensor};
use candle_nn::Module;

use crate::error::Result;
use crate::net::params::ParamStore;

/// 3x3 same-padded convolution lowered to a single batched matmul over
/// im2col patches. Weight layout is `(out, in * 9)` with the 3x3 offsets
/// innermost.
#[derive(Debug, Clone)]
pub struct Conv3x3 {
    weight: Tensor,
    bias: Tensor,
    out_ch: usize,
}

impl Conv3x3 {
    pub fn new(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize) -> Result<Self> {
        let bound = 1.0 / ((in_ch * 9) as f64).sqrt();
        let weight = store.uniform(&format!("{name}.weight"), &[out_ch, in_ch * 9], bound)?;
        let bias = store.uniform(&format!("{name}.bias"), &[out_ch], bound)?;
        Ok(Self { weight, bias, out_ch })
    }

    pub fn zeros(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize) -> Result<Self> {
        let weight = store.constant(&format!("{name}.weight"), &[out_ch, in_ch * 9], 0.0)?;
        let bias = store.constant(&format!("{name}.bias"), &[out_ch], 0.0)?;
        Ok(Self { weight, bias, out_ch })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let padded = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
        let mut patches = Vec::with_capacity(9);
        for di in 0..3 {
            for dj in 0..3 {
                patches.push(padded.narrow(2, di, h)?.narrow(3, dj, w)?);
            }
        }
        let cols = Tensor::stack(&patches, 2)?.reshape((b, c * 9, h * w))?;
        // a stride-0 batch dimension yields wrong matmul results, so materialize it
        let weight = self.weight.broadcast_left(b)?.contiguous()?;
        let y = weight.matmul(&cols)?.reshape((b, self.out_ch, h, w))?;
        Ok(y.broadcast_add(&self.bias.reshape((1, self.out_ch, 1, 1))?)?)
    }
}

/// Per-pixel channel mixing.
#[derive(Debug, Clone)]
pub struct Conv1x1 {
    weight: Tensor,
    bias: Tensor,
    out_ch: usize,
}

impl Conv1x1 {
    pub fn new(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize) -> Result<Self> {
        let bound = 1.0 / (in_ch as f64).sqrt();
        let weight = store.uniform(&format!("{name}.weight"), &[out_ch, in_ch], bound)?;
        let bias = store.uniform(&format!("{name}.bias"), &[out_ch], bound)?;
        Ok(Self { weight, bias, out_ch })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let weight = self.weight.broadcast_left(b)?.contiguous()?;
        let y = weight.matmul(&x.reshape((b, c, h * w))?)?.reshape((b, self.out_ch, h, w))?;
        Ok(y.broadcast_add(&self.bias.reshape((1, self.out_ch, 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Dense {
    weight: Tensor,
    bias: Tensor,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.uniform(&format!("{name}.weight"), &[out_dim, in_dim], bound)?;
        let bias = store.uniform(&format!("{name}.bias"), &[out_dim], bound)?;
        Ok(Self { weight, bias })
    }

    /// `x` has shape `(B, in_dim)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// Group normalization with learned affine parameters.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    inner: candle_nn::GroupNorm,
}

/// Largest of 8, 4, 2, 1 that divides `channels`.
pub fn group_count(channels: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let weight = store.constant(&format!("{name}.weight"), &[channels], 1.0)?;
        let bias = store.constant(&format!("{name}.bias"), &[channels], 0.0)?;
        Ok(Self { inner: candle_nn::GroupNorm::new(weight, bias, channels, group_count(channels), 1e-5)? })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.inner.forward(x)?)
    }
}

/// Sinusoidal embedding of integer diffusion steps, shape `(B, dim)`:
/// sines of `t * 10000^(-i / half)` followed by the matching cosines.
pub fn timestep_embedding(steps: &[usize], dim: usize, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(steps.len() * dim);
    for &t in steps {
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| t as f64 * f).collect();
        data.extend(args.iter().map(|a| a.sin() as f32));
        data.extend(args.iter().map(|a| a.cos() as f32));
        data.extend(std::iter::repeat_n(0f32, dim - 2 * half));
    }
    Ok(Tensor::from_vec(data, (steps.len(), dim), device)?)
}
