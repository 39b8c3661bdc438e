use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::SensorGrid;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelFamily {
    /// `σ² exp(−r² / 2l²)`
    SquaredExponential,
    /// `σ² exp(−r / l)`
    Exponential,
}

/// Stationary isotropic covariance kernel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub sigma: f64,
    pub length: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, sigma: f64, length: f64) -> Result<Self> {
        let k = Self {
            family,
            sigma,
            length,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn squared_exponential(sigma: f64, length: f64) -> Result<Self> {
        Self::new(KernelFamily::SquaredExponential, sigma, length)
    }

    pub fn exponential(sigma: f64, length: f64) -> Result<Self> {
        Self::new(KernelFamily::Exponential, sigma, length)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid(format!("kernel sigma must be >= 0, got {}", self.sigma)));
        }
        if !(self.length > 0.0 && self.length.is_finite()) {
            return Err(Error::invalid(format!("kernel length must be > 0, got {}", self.length)));
        }
        Ok(())
    }

    /// Covariance as a function of distance.
    pub fn at_distance(&self, r: f64) -> f64 {
        let s2 = self.sigma * self.sigma;
        match self.family {
            KernelFamily::SquaredExponential => s2 * (-0.5 * r * r / (self.length * self.length)).exp(),
            KernelFamily::Exponential => s2 * (-r / self.length).exp(),
        }
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let r2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        self.at_distance(r2.sqrt())
    }
}

/// `K[i, j] = k(x_i, x_j)`, filled from the upper triangle so it is exactly
/// symmetric.
pub fn gram_matrix(kernel: &KernelSpec, grid: &SensorGrid) -> Result<DMatrix<f64>> {
    if grid.is_empty() {
        return Err(Error::invalid("gram_matrix needs a non-empty grid"));
    }
    let pts = grid.points();
    Ok(gram_of_points(kernel, &pts))
}

pub(crate) fn gram_of_points(kernel: &KernelSpec, pts: &[Vec<f64>]) -> DMatrix<f64> {
    let n = pts.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = kernel.eval(&pts[i], &pts[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

pub const JITTER_START: f64 = 1e-12;
pub const JITTER_MAX: f64 = 1e-6;

/// Lower Cholesky factor of `k + jitter·s·I` where `s` is the largest
/// diagonal entry. Jitter starts at [`JITTER_START`] and grows tenfold up to
/// [`JITTER_MAX`]. A zero matrix factors to zero.
pub fn jittered_cholesky(k: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = k.nrows();
    let scale = k.diagonal().iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    if scale == 0.0 {
        return Ok(DMatrix::zeros(n, n));
    }
    let mut jitter = JITTER_START;
    loop {
        let mut m = k.clone();
        for i in 0..n {
            m[(i, i)] += jitter * scale;
        }
        if let Some(c) = nalgebra::Cholesky::new(m) {
            return Ok(c.unpack());
        }
        if jitter >= JITTER_MAX {
            log::debug!("cholesky failed at jitter {jitter:e}, size {n}");
            return Err(Error::Cholesky { jitter, size: n });
        }
        jitter = (jitter * 10.0).min(JITTER_MAX);
    }
}
