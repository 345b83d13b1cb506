//! Bridges between complex ndarray data and real channel tensors, and a
//! differentiable wrapper for self-adjoint measurement operators.

use std::sync::Arc;

use candle_core::{CpuStorage, CustomOp1, Device, Layout, Shape, Tensor};
use ndarray::{Array3, ArrayView3};
use num_complex::Complex64;

use crate::error::{DimoError, Result};
use crate::mri::{kspace_normal, ForwardModel};
use crate::vfa::MultiFlipAcquisition;

/// Appends complex planes `(N, H, W)` as `2N` real channels with real and
/// imaginary parts interleaved.
pub fn push_channels(x: &ArrayView3<Complex64>, out: &mut Vec<f32>) {
    for plane in x.outer_iter() {
        out.extend(plane.iter().map(|v| v.re as f32));
        out.extend(plane.iter().map(|v| v.im as f32));
    }
}

/// Stacks complex volumes into a `(B, 2N, H, W)` f32 tensor.
pub fn complex_batch_to_tensor(batch: &[Array3<Complex64>], device: &Device) -> Result<Tensor> {
    let first = batch.first().ok_or_else(|| DimoError::InvalidArgument("empty batch".into()))?;
    let (n, h, w) = first.dim();
    let mut data = Vec::with_capacity(batch.len() * 2 * n * h * w);
    for x in batch {
        if x.dim() != (n, h, w) {
            return Err(DimoError::Shape(format!("batch item {:?} vs {:?}", x.dim(), (n, h, w))));
        }
        push_channels(&x.view(), &mut data);
    }
    Ok(Tensor::from_vec(data, (batch.len(), 2 * n, h, w), device)?)
}

fn planes_from_slice<T: Copy + Into<f64>>(data: &[T], n: usize, h: usize, w: usize) -> Array3<Complex64> {
    let plane = h * w;
    Array3::from_shape_fn((n, h, w), |(k, i, j)| {
        let base = 2 * k * plane + i * w + j;
        Complex64::new(data[base].into(), data[base + plane].into())
    })
}

/// Inverse of [`complex_batch_to_tensor`].
pub fn tensor_to_complex_batch(t: &Tensor) -> Result<Vec<Array3<Complex64>>> {
    let (b, c, h, w) = t.dims4()?;
    if c % 2 != 0 {
        return Err(DimoError::Shape(format!("{c} channels cannot hold complex pairs")));
    }
    let data: Vec<f32> = t.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1()?;
    let item = c * h * w;
    Ok((0..b).map(|k| planes_from_slice(&data[k * item..(k + 1) * item], c / 2, h, w)).collect())
}

/// A complex-linear map that is self-adjoint, so it is also its own
/// vector-Jacobian product in the real channel representation.
pub trait SelfAdjoint: Send + Sync {
    fn apply(&self, x: &Array3<Complex64>) -> Result<Array3<Complex64>>;
}

/// Normal operator of the k-space fidelity.
pub struct KspaceNormal(pub ForwardModel);

impl SelfAdjoint for KspaceNormal {
    fn apply(&self, x: &Array3<Complex64>) -> Result<Array3<Complex64>> {
        kspace_normal(&self.0, &x.view())
    }
}

/// Per-angle image-domain normal operators.
pub struct AngleNormal(pub Arc<MultiFlipAcquisition>);

impl SelfAdjoint for AngleNormal {
    fn apply(&self, x: &Array3<Complex64>) -> Result<Array3<Complex64>> {
        self.0.normal(&x.view())
    }
}

/// Applies one [`SelfAdjoint`] operator per batch item to a `(B, 2N, H, W)`
/// tensor, in double precision.
#[derive(Clone)]
pub struct BatchedOperator {
    ops: Arc<Vec<Arc<dyn SelfAdjoint>>>,
}

impl BatchedOperator {
    pub fn new(ops: Vec<Arc<dyn SelfAdjoint>>) -> Self {
        Self { ops: Arc::new(ops) }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.contiguous()?.apply_op1(self.clone())?)
    }

    fn run(&self, data: &[f32], shape: &Shape) -> Result<Vec<f32>> {
        let (b, c, h, w) = shape.dims4()?;
        if b != self.ops.len() || c % 2 != 0 {
            return Err(DimoError::Shape(format!("operator batch {} vs tensor {:?}", self.ops.len(), shape.dims())));
        }
        let item = c * h * w;
        let mut out = Vec::with_capacity(data.len());
        for (k, op) in self.ops.iter().enumerate() {
            let x = planes_from_slice(&data[k * item..(k + 1) * item], c / 2, h, w);
            let y = op.apply(&x)?;
            if y.dim() != x.dim() {
                return Err(DimoError::Shape(format!("operator changed shape {:?} -> {:?}", x.dim(), y.dim())));
            }
            push_channels(&y.view(), &mut out);
        }
        Ok(out)
    }
}

impl CustomOp1 for BatchedOperator {
    fn name(&self) -> &'static str {
        "self-adjoint-operator"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (start, end) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("operator input must be contiguous".into()))?;
        let data = match storage {
            CpuStorage::F32(v) => &v[start..end],
            _ => return Err(candle_core::Error::Msg("operator expects f32 input".into())),
        };
        let out = self.run(data, layout.shape()).map_err(|e| candle_core::Error::Msg(e.to_string()))?;
        Ok((CpuStorage::F32(out), layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(self)?))
    }
}
