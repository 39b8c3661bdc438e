//! The two-head autoencoder DeepONet, its loss, training loop and
//! checkpoints.

pub mod checkpoint;
mod net;
mod spec;
mod train;

pub use net::{Batch, Head, Heads, LossParts, MultiAutoModel, Penalty, Sensors};
pub use spec::{Affine, ArchConfig, BasisSpec, EncoderSpec, FieldNorm, ModelKind, ModelSpec};
pub use train::{evaluate_loss, fit, split_rows, train, TrainConfig, TrainHistory, TrainReport, Trainable};

#[cfg(test)]
mod tests;
