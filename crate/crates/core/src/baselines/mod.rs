//! Comparison models: PCA input reduction, the Legendre chaos basis and the
//! vanilla DeepONet fed with Karhunen–Loève features.

mod deeponet;
mod pca;
mod pce;

pub use deeponet::{deeponet_forward, DeepOnet, DeepOnetData, DeepOnetSpec};
pub use pca::{pca_fit, PcaProjection};
pub use pce::{binomial, gaussian_to_unit, legendre_eval, PceBasis};
