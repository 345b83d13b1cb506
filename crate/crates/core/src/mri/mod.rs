//! Multi-coil MRI encoding physics.

mod fft;
mod mask;
mod ops;
mod types;

pub use fft::{fft2c, ifft2c};
pub use mask::{make_cartesian_mask, make_poisson_mask, POISSON_BUDGET_TOLERANCE, VARIABLE_DENSITY_POWER};
pub use ops::{
    apply_adjoint, apply_forward, coil_combine_adjoint, coil_expand, data_consistency, kspace_fidelity_grad,
    kspace_fidelity_loss, reconstruct_image, sense_combine,
};
pub(crate) use ops::{data_consistency_in_place, image_normal, kspace_normal, kspace_rhs};
pub use types::{CenterRegion, CoilMaps, ComplexImage, ForwardModel, KSpace, SamplingMask};
