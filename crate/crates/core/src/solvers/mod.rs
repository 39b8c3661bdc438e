//! Reference solution operators for the benchmark problems: the random
//! growth ODE, 1D and 2D Poisson with homogeneous Dirichlet data, and the
//! closed-form KdV solution under additive time-dependent forcing.

mod kdv;
mod poisson;

pub use kdv::kdv_solution;
pub use poisson::{solve_poisson_1d, solve_poisson_2d, Poisson2d};

use crate::error::{Error, Result};
use crate::stoch::SensorGrid;

/// Values on a tensor grid, row-major: `values[i * y.len() + j] = u(x_i, y_j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Field2D {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub values: Vec<f64>,
}

impl Field2D {
    pub fn new(x: Vec<f64>, y: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if values.len() != x.len() * y.len() {
            return Err(Error::InvalidShape {
                shape: vec![x.len(), y.len()],
                reason: format!("got {} values", values.len()),
            });
        }
        Ok(Self { x, y, values })
    }

    pub fn from_fn(x: Vec<f64>, y: Vec<f64>, f: impl Fn(f64, f64) -> f64) -> Self {
        let values = x.iter().flat_map(|&a| y.iter().map(move |&b| (a, b))).map(|(a, b)| f(a, b)).collect();
        Self { x, y, values }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.y.len() + j]
    }

    pub fn grid(&self) -> SensorGrid {
        SensorGrid::Tensor {
            x: self.x.clone(),
            y: self.y.clone(),
        }
    }

    /// Keeps every `step`-th node in both directions.
    pub fn restrict(&self, step: usize) -> Result<Self> {
        if step == 0 || (self.x.len() - 1) % step != 0 || (self.y.len() - 1) % step != 0 {
            return Err(Error::invalid(format!("cannot restrict {}x{} by {step}", self.x.len(), self.y.len())));
        }
        let xi: Vec<usize> = (0..self.x.len()).step_by(step).collect();
        let yi: Vec<usize> = (0..self.y.len()).step_by(step).collect();
        let values = xi.iter().flat_map(|&i| yi.iter().map(move |&j| (i, j))).map(|(i, j)| self.at(i, j)).collect();
        Ok(Self {
            x: xi.iter().map(|&i| self.x[i]).collect(),
            y: yi.iter().map(|&j| self.y[j]).collect(),
            values,
        })
    }
}

/// Running trapezoid integral, starting at 0.
pub fn cumulative_trapezoid(t: &[f64], f: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(t.len());
    let mut acc = 0.0;
    for i in 0..t.len() {
        if i > 0 {
            acc += 0.5 * (t[i] - t[i - 1]) * (f[i] + f[i - 1]);
        }
        out.push(acc);
    }
    out
}

/// `u(t) = exp(∫₀ᵗ k)` for `du/dt = k u`, `u(0) = 1`. The grid must start at
/// `t = 0` and increase.
pub fn solve_growth_ode(t: &[f64], k: &[f64]) -> Result<Vec<f64>> {
    if t.is_empty() {
        return Err(Error::invalid("growth ODE needs a non-empty time grid"));
    }
    if t.len() != k.len() {
        return Err(Error::ShapeMismatch {
            op: "solve_growth_ode",
            lhs: vec![t.len()],
            rhs: vec![k.len()],
        });
    }
    if t[0] != 0.0 || t.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("time grid must start at 0 and increase"));
    }
    Ok(cumulative_trapezoid(t, k).into_iter().map(f64::exp).collect())
}
