//! Latent-space kernel density generator, ensemble statistics and the error
//! metrics reported by the harness.

mod kde;
mod metrics;

pub use kde::{decode_latents, generate_ensemble, kde_fit, kde_sample, KdeModel, BANDWIDTH_FLOOR};
pub use metrics::{
    avg_rel_l2, ensemble_stats, ks_statistic, mse, rel_l2, write_metrics_csv, EnsembleStats, MetricRow,
};
