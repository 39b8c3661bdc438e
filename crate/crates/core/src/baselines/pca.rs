use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stoch::FunctionEnsemble;

/// Leading principal directions of an ensemble.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaProjection {
    pub mean: Vec<f64>,
    /// `[r][n_sensors]`, orthonormal rows.
    pub components: Vec<Vec<f64>>,
    /// Sample-covariance eigenvalues of the retained directions.
    pub variances: Vec<f64>,
    /// Sum of all sample-covariance eigenvalues.
    pub total_variance: f64,
}

/// Top-`r` eigenvectors of the unbiased sample covariance. Each component's
/// largest-magnitude entry is positive.
pub fn pca_fit(ensemble: &FunctionEnsemble, r: usize) -> Result<PcaProjection> {
    let (n, m) = (ensemble.n_samples(), ensemble.n_sensors());
    if r == 0 || r > n.min(m) {
        return Err(Error::invalid(format!(
            "cannot retain {r} components from {n} samples of {m} sensors"
        )));
    }
    if n < 2 {
        return Err(Error::invalid("pca_fit needs at least two samples"));
    }
    let mean = ensemble.mean();
    let x = DMatrix::from_fn(n, m, |i, j| ensemble.sample(i)[j] - mean[j]);
    let cov = (x.transpose() * &x) / (n - 1) as f64;
    let total_variance = cov.trace();
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut components = Vec::with_capacity(r);
    let mut variances = Vec::with_capacity(r);
    for &c in order.iter().take(r) {
        let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
        let peak = v.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if peak < 0.0 {
            v.iter_mut().for_each(|e| *e = -*e);
        }
        components.push(v);
        variances.push(eig.eigenvalues[c].max(0.0));
    }
    Ok(PcaProjection {
        mean,
        components,
        variances,
        total_variance,
    })
}

impl PcaProjection {
    pub fn retained(&self) -> usize {
        self.components.len()
    }

    pub fn n_sensors(&self) -> usize {
        self.mean.len()
    }

    pub fn project(&self, values: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(values).zip(&self.mean).map(|((a, v), m)| a * (v - m)).sum())
            .collect()
    }

    pub fn reconstruct(&self, coords: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, a) in self.components.iter().zip(coords) {
            for (o, v) in out.iter_mut().zip(c) {
                *o += a * v;
            }
        }
        out
    }

    /// Projection scaled to unit sample variance per component.
    pub fn whiten(&self, values: &[f64]) -> Vec<f64> {
        self.project(values)
            .into_iter()
            .zip(&self.variances)
            .map(|(a, v)| if *v > 0.0 { a / v.sqrt() } else { 0.0 })
            .collect()
    }
}
