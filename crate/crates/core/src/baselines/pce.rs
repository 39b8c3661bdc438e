use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Legendre polynomial `P_n(x)` with `P_n(1) = 1`, by the three-term
/// recurrence. `x` must lie in `[−1, 1]`.
pub fn legendre_eval(degree: usize, x: f64) -> Result<f64> {
    if !(-1.0..=1.0).contains(&x) {
        return Err(Error::invalid(format!("Legendre argument {x} outside [-1, 1]")));
    }
    Ok(legendre_unchecked(degree, x))
}

fn legendre_unchecked(degree: usize, x: f64) -> f64 {
    let (mut p0, mut p1) = (1.0, x);
    if degree == 0 {
        return p0;
    }
    for n in 1..degree {
        let n = n as f64;
        let p2 = ((2.0 * n + 1.0) * x * p1 - n * p0) / (n + 1.0);
        p0 = p1;
        p1 = p2;
    }
    p1
}

/// Maps a standard normal variable to `[−1, 1]` through its CDF: `2Φ(ξ) − 1`.
pub fn gaussian_to_unit(xi: f64) -> f64 {
    libm::erf(xi / std::f64::consts::SQRT_2)
}

/// Total-degree Legendre chaos basis over `d` variables up to degree `q`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PceBasis {
    pub d: usize,
    pub q: usize,
    /// Ordered by total degree, then lexicographically descending.
    pub indices: Vec<Vec<usize>>,
}

fn compositions(d: usize, total: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if prefix.len() + 1 == d {
        prefix.push(total);
        out.push(prefix.clone());
        prefix.pop();
        return;
    }
    for first in (0..=total).rev() {
        prefix.push(first);
        compositions(d, total - first, prefix, out);
        prefix.pop();
    }
}

impl PceBasis {
    pub fn new(d: usize, q: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::invalid("PCE needs at least one variable"));
        }
        let mut indices = Vec::new();
        for total in 0..=q {
            compositions(d, total, &mut Vec::new(), &mut indices);
        }
        Ok(Self { d, q, indices })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Tensor-product Legendre values at `xi ∈ [−1, 1]^d`.
    pub fn eval(&self, xi: &[f64]) -> Result<Vec<f64>> {
        if xi.len() != self.d {
            return Err(Error::ShapeMismatch {
                op: "pce_basis_eval",
                lhs: vec![self.d],
                rhs: vec![xi.len()],
            });
        }
        let table = xi
            .iter()
            .map(|&x| (0..=self.q).map(|n| legendre_eval(n, x)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        Ok(self
            .indices
            .iter()
            .map(|alpha| alpha.iter().enumerate().map(|(k, &n)| table[k][n]).product())
            .collect())
    }
}

/// Binomial coefficient, exact for the small arguments used here.
pub fn binomial(n: usize, k: usize) -> usize {
    (0..k.min(n - k)).fold(1, |acc, i| acc * (n - i) / (i + 1))
}
