use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::StandardNormal;

use super::kernel::{gram_matrix, jittered_cholesky, KernelFamily};
use super::{FunctionEnsemble, KernelSpec, SensorGrid};
use crate::error::{Error, Result};
use crate::rng;

/// Draws `n` Gaussian-process samples `mean + L·η` on `grid`.
///
/// Squared-exponential kernels on tensor grids factor as a Kronecker
/// product, so only the two one-dimensional Gram matrices are decomposed.
pub fn gp_sample(
    mean: &dyn Fn(&[f64]) -> f64,
    kernel: &KernelSpec,
    grid: &SensorGrid,
    n: usize,
    seed: u64,
) -> Result<FunctionEnsemble> {
    if n == 0 {
        return Err(Error::invalid("gp_sample needs at least one sample"));
    }
    kernel.validate()?;
    grid.validate()?;
    let m = grid.len();
    let mut r = rng::stream(seed, "gp_sample", 0);
    let mut eta = DMatrix::<f64>::zeros(m, n);
    // column j holds sample j, filled sample by sample for stable streams
    for j in 0..n {
        for i in 0..m {
            eta[(i, j)] = r.sample(StandardNormal);
        }
    }

    let draws = match (grid, kernel.family) {
        (SensorGrid::Tensor { x, y }, KernelFamily::SquaredExponential) => {
            let unit = KernelSpec {
                sigma: 1.0,
                ..*kernel
            };
            let lx = jittered_cholesky(&gram_matrix(&unit, &SensorGrid::Line(x.clone()))?)?;
            let ly = jittered_cholesky(&gram_matrix(&unit, &SensorGrid::Line(y.clone()))?)?;
            let (nx, ny) = (x.len(), y.len());
            let mut out = DMatrix::<f64>::zeros(m, n);
            for j in 0..n {
                // (Lx ⊗ Ly) vec(H) = vec(Lx H Lyᵀ) with H laid out x-major
                let h = DMatrix::from_fn(nx, ny, |a, b| eta[(a * ny + b, j)]);
                let f = &lx * h * ly.transpose() * kernel.sigma;
                for a in 0..nx {
                    for b in 0..ny {
                        out[(a * ny + b, j)] = f[(a, b)];
                    }
                }
            }
            out
        }
        _ => {
            let l = jittered_cholesky(&gram_matrix(kernel, grid)?)?;
            l * eta
        }
    };

    let mu: Vec<f64> = grid.points().iter().map(|p| mean(p)).collect();
    let mut values = Vec::with_capacity(m * n);
    for j in 0..n {
        values.extend((0..m).map(|i| mu[i] + draws[(i, j)]));
    }
    FunctionEnsemble::new(grid.clone(), values)
}
