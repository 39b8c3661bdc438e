//! Gaussian random processes on sensor grids: covariance kernels, sampling,
//! Karhunen–Loève modes and the ensemble container used for all datasets.

mod ensemble;
mod gp;
mod grid;
mod kernel;
mod kl;

pub use ensemble::FunctionEnsemble;
pub use gp::gp_sample;
pub use grid::{linspace, SensorGrid};
pub use kernel::{gram_matrix, jittered_cholesky, KernelFamily, KernelSpec, JITTER_MAX, JITTER_START};
pub use kl::{kl_field_from_coords, kl_field_sample, kl_modes, KlBasis};
