use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::stoch::FunctionEnsemble;

fn same_len(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    Ok(())
}

/// `‖pred − reference‖₂ / ‖reference‖₂`.
pub fn rel_l2(pred: &[f64], reference: &[f64]) -> Result<f64> {
    same_len("rel_l2", pred, reference)?;
    let norm = reference.iter().map(|r| r * r).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::invalid(format!("relative error against a reference of norm {norm}")));
    }
    let diff = pred.iter().zip(reference).map(|(p, r)| (p - r).powi(2)).sum::<f64>().sqrt();
    Ok(diff / norm)
}

/// Mean over samples of the per-sample relative l2 error.
pub fn avg_rel_l2(pred: &FunctionEnsemble, reference: &FunctionEnsemble) -> Result<f64> {
    if pred.n_samples() != reference.n_samples() || pred.n_sensors() != reference.n_sensors() {
        return Err(Error::ShapeMismatch {
            op: "avg_rel_l2",
            lhs: vec![pred.n_samples(), pred.n_sensors()],
            rhs: vec![reference.n_samples(), reference.n_sensors()],
        });
    }
    if pred.n_samples() == 0 {
        return Err(Error::invalid("average over an empty ensemble"));
    }
    let mut sum = 0.0;
    for i in 0..pred.n_samples() {
        sum += rel_l2(pred.sample(i), reference.sample(i))?;
    }
    Ok(sum / pred.n_samples() as f64)
}

/// Mean squared error over all entries.
pub fn mse(pred: &[f64], reference: &[f64]) -> Result<f64> {
    same_len("mse", pred, reference)?;
    if pred.is_empty() {
        return Err(Error::invalid("mean squared error of nothing"));
    }
    Ok(pred.iter().zip(reference).map(|(p, r)| (p - r).powi(2)).sum::<f64>() / pred.len() as f64)
}

/// Per-sensor sample mean and unbiased variance.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleStats {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

pub fn ensemble_stats(ensemble: &FunctionEnsemble) -> Result<EnsembleStats> {
    let n = ensemble.n_samples();
    if n < 2 {
        return Err(Error::invalid(format!("variance needs at least 2 samples, got {n}")));
    }
    let mean = ensemble.mean();
    let mut variance = vec![0.0; mean.len()];
    for i in 0..n {
        for ((v, x), m) in variance.iter_mut().zip(ensemble.sample(i)).zip(&mean) {
            *v += (x - m).powi(2);
        }
    }
    variance.iter_mut().for_each(|v| *v /= (n - 1) as f64);
    Ok(EnsembleStats { mean, variance })
}

/// Kolmogorov–Smirnov distance between the empirical distribution of
/// `samples` (sorted in place) and `cdf`.
pub fn ks_statistic(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    samples
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// One line of a metrics table.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub experiment: String,
    pub metric: String,
    pub value: f64,
}

impl MetricRow {
    pub fn new(experiment: impl Into<String>, metric: impl Into<String>, value: f64) -> Self {
        Self {
            experiment: experiment.into(),
            metric: metric.into(),
            value,
        }
    }
}

/// Writes `experiment,metric,value` rows. Values use the shortest exact
/// decimal representation, so equal numbers give equal bytes.
pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "experiment,metric,value").unwrap();
    for r in rows {
        if r.experiment.contains(',') || r.metric.contains(',') {
            return Err(Error::invalid(format!("comma in metric label {}/{}", r.experiment, r.metric)));
        }
        writeln!(out, "{},{},{:e}", r.experiment, r.metric, r.value).unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
