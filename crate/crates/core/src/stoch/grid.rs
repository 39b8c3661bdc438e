use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered sensor coordinates.
///
/// A `Tensor` grid enumerates points x-major: point `i * ny + j` is
/// `(x[i], y[j])`, which is also the row-major layout of a `[nx, ny]` image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SensorGrid {
    Line(Vec<f64>),
    Tensor { x: Vec<f64>, y: Vec<f64> },
}

pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![a],
        _ => {
            let h = (b - a) / (n - 1) as f64;
            (0..n)
                .map(|i| if i + 1 == n { b } else { a + h * i as f64 })
                .collect()
        }
    }
}

fn trapezoid_weights(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n == 1 {
        return vec![1.0];
    }
    let mut w = vec![0.0; n];
    for i in 0..n - 1 {
        let h = 0.5 * (x[i + 1] - x[i]);
        w[i] += h;
        w[i + 1] += h;
    }
    w
}

impl SensorGrid {
    pub fn uniform(a: f64, b: f64, n: usize) -> Self {
        SensorGrid::Line(linspace(a, b, n))
    }

    pub fn uniform_2d(x: (f64, f64, usize), y: (f64, f64, usize)) -> Self {
        SensorGrid::Tensor {
            x: linspace(x.0, x.1, x.2),
            y: linspace(y.0, y.1, y.2),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            SensorGrid::Line(x) => x.len(),
            SensorGrid::Tensor { x, y } => x.len() * y.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Coordinate dimension of one point.
    pub fn dim(&self) -> usize {
        match self {
            SensorGrid::Line(_) => 1,
            SensorGrid::Tensor { .. } => 2,
        }
    }

    /// Image extents: `[n]` or `[nx, ny]`.
    pub fn extents(&self) -> Vec<usize> {
        match self {
            SensorGrid::Line(x) => vec![x.len()],
            SensorGrid::Tensor { x, y } => vec![x.len(), y.len()],
        }
    }

    pub fn point(&self, i: usize) -> Vec<f64> {
        match self {
            SensorGrid::Line(x) => vec![x[i]],
            SensorGrid::Tensor { x, y } => vec![x[i / y.len()], y[i % y.len()]],
        }
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.point(i)).collect()
    }

    /// `[len, dim]` coordinate matrix, the trunk-net input layout.
    pub fn coordinates(&self) -> Tensor {
        let data = self.points().into_iter().flatten().collect();
        Tensor::new([self.len(), self.dim()], data).expect("grid is non-empty")
    }

    /// Trapezoid quadrature weights (tensor products in 2D).
    pub fn quadrature_weights(&self) -> Vec<f64> {
        match self {
            SensorGrid::Line(x) => trapezoid_weights(x),
            SensorGrid::Tensor { x, y } => {
                let (wx, wy) = (trapezoid_weights(x), trapezoid_weights(y));
                wx.iter()
                    .flat_map(|a| wy.iter().map(move |b| a * b))
                    .collect()
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let increasing = |v: &[f64]| !v.is_empty() && v.windows(2).all(|w| w[1] > w[0]);
        let ok = match self {
            SensorGrid::Line(x) => increasing(x),
            SensorGrid::Tensor { x, y } => increasing(x) && increasing(y),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("sensor coordinates must be non-empty and strictly increasing"))
        }
    }
}
