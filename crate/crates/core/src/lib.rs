pub mod baselines;
pub mod error;
pub mod harness;
pub mod model;
pub mod nn;
pub mod rng;
pub mod solvers;
pub mod stoch;
pub mod tensor;
pub mod uq;

pub use error::{Error, Result};
