//! Diffusion reconstruction conditioned on the native MRI data domain.
//!
//! Static reconstruction runs the diffusion chain directly on multi-coil
//! k-space; quantitative T1 mapping runs it on the parameter maps of the
//! variable-flip-angle signal model. Both chains interleave a learned noise
//! predictor with data-consistency blending and gradient-descent refinement
//! against the measured samples.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod harness;
pub mod metrics;
pub mod mri;
pub mod net;
pub mod quant_dimo;
pub mod schedule;
pub mod static_dimo;
pub mod vfa;

pub use error::{DimoError, Result};
