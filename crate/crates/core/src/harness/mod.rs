//! Configuration-driven experiment pipeline: dataset generation, training,
//! evaluation, comparisons, sensor sweeps and SVG plots.

pub mod config;
pub mod data;
pub mod models;
pub mod plot;
pub mod run;

pub use config::{Axis, ExperimentConfig, ModelChoice, Problem};
pub use data::{simulate, Dataset, Manifest, Splits};
pub use models::{evaluate_model, train_model, Evaluation, Trained};
pub use plot::emit_plots;
pub use run::{compare, configure_threads, evaluate_run, generate, run_experiment, sweep, train_run};
