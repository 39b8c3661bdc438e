use super::Field2D;
use crate::error::{Error, Result};

fn uniform_step(x: &[f64], what: &str) -> Result<f64> {
    if x.len() < 3 {
        return Err(Error::invalid(format!("{what}: need at least 3 grid points")));
    }
    let h = (x[x.len() - 1] - x[0]) / (x.len() - 1) as f64;
    let uniform = x.windows(2).all(|w| ((w[1] - w[0]) - h).abs() <= 1e-9 * h.abs());
    if !uniform || h <= 0.0 {
        return Err(Error::invalid(format!("{what}: grid must be uniform and increasing")));
    }
    Ok(h)
}

/// Solves `−u″ = f` with `u = 0` at both ends by central differences.
///
/// `x` is the full uniform grid including the two boundary nodes; the
/// values of `f` there are ignored and `u` is returned on the full grid.
pub fn solve_poisson_1d(x: &[f64], f: &[f64]) -> Result<Vec<f64>> {
    let h = uniform_step(x, "solve_poisson_1d")?;
    if f.len() != x.len() {
        return Err(Error::ShapeMismatch {
            op: "solve_poisson_1d",
            lhs: vec![x.len()],
            rhs: vec![f.len()],
        });
    }
    let n = x.len() - 2;
    // Thomas algorithm on tridiag(−1, 2, −1) u = h² f
    let mut c = vec![0.0f64; n];
    let mut d = vec![0.0; n];
    for i in 0..n {
        let rhs = h * h * f[i + 1];
        let (cprev, dprev) = if i == 0 { (0.0, 0.0) } else { (c[i - 1], d[i - 1]) };
        let denom = 2.0 + cprev;
        if denom.abs() < 1e-300 {
            return Err(Error::invalid("singular tridiagonal system"));
        }
        c[i] = -1.0 / denom;
        d[i] = (rhs + dprev) / denom;
    }
    let mut u = vec![0.0; n + 2];
    for i in (0..n).rev() {
        u[i + 1] = d[i] - c[i] * u[i + 2];
    }
    Ok(u)
}

/// Banded Cholesky factor of the 5-point Dirichlet Laplacian on the interior
/// of an `nx × ny` uniform grid, reusable across right-hand sides.
#[derive(Clone, Debug)]
pub struct Poisson2d {
    nx: usize,
    ny: usize,
    hx: f64,
    hy: f64,
    /// `band[i * (bw + 1) + k] = L[i, i − k]`
    band: Vec<f64>,
    bw: usize,
}

impl Poisson2d {
    pub fn new(x: &[f64], y: &[f64]) -> Result<Self> {
        let hx = uniform_step(x, "solve_poisson_2d x")?;
        let hy = uniform_step(y, "solve_poisson_2d y")?;
        let (nx, ny) = (x.len(), y.len());
        let (mx, my) = (nx - 2, ny - 2);
        let n = mx * my;
        let bw = my;
        let (ax, ay) = (1.0 / (hx * hx), 1.0 / (hy * hy));
        let a = |i: usize, j: usize| -> f64 {
            // i ≥ j, i − j ≤ bw
            let d = i - j;
            if d == 0 {
                2.0 * ax + 2.0 * ay
            } else if d == 1 && i % my != 0 {
                -ay
            } else if d == my {
                -ax
            } else {
                0.0
            }
        };
        let w = bw + 1;
        let mut band = vec![0.0; n * w];
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            for j in lo..=i {
                let mut s = a(i, j);
                for k in lo.max(j.saturating_sub(bw))..j {
                    s -= band[i * w + (i - k)] * band[j * w + (j - k)];
                }
                if i == j {
                    if s <= 0.0 {
                        return Err(Error::Cholesky { jitter: 0.0, size: n });
                    }
                    band[i * w] = s.sqrt();
                } else {
                    band[i * w + (i - j)] = s / band[j * w];
                }
            }
        }
        Ok(Self {
            nx,
            ny,
            hx,
            hy,
            band,
            bw,
        })
    }

    /// Solves for `u` given `f` on the full grid (row-major, x-major).
    pub fn solve(&self, f: &[f64]) -> Result<Vec<f64>> {
        let (nx, ny) = (self.nx, self.ny);
        if f.len() != nx * ny {
            return Err(Error::ShapeMismatch {
                op: "solve_poisson_2d",
                lhs: vec![nx, ny],
                rhs: vec![f.len()],
            });
        }
        let my = ny - 2;
        let n = (nx - 2) * my;
        let w = self.bw + 1;
        let mut z: Vec<f64> = (0..n).map(|k| f[(k / my + 1) * ny + k % my + 1]).collect();
        for i in 0..n {
            let lo = i.saturating_sub(self.bw);
            let mut s = z[i];
            for k in lo..i {
                s -= self.band[i * w + (i - k)] * z[k];
            }
            z[i] = s / self.band[i * w];
        }
        for i in (0..n).rev() {
            let hi = (i + self.bw).min(n - 1);
            let mut s = z[i];
            for k in i + 1..=hi {
                s -= self.band[k * w + (k - i)] * z[k];
            }
            z[i] = s / self.band[i * w];
        }
        let mut u = vec![0.0; nx * ny];
        for (k, v) in z.into_iter().enumerate() {
            u[(k / my + 1) * ny + k % my + 1] = v;
        }
        Ok(u)
    }

    /// Max-norm residual of the discrete equations at interior nodes.
    pub fn residual(&self, u: &[f64], f: &[f64]) -> f64 {
        let ny = self.ny;
        let (ax, ay) = (1.0 / (self.hx * self.hx), 1.0 / (self.hy * self.hy));
        let mut worst: f64 = 0.0;
        for i in 1..self.nx - 1 {
            for j in 1..ny - 1 {
                let c = i * ny + j;
                let lap = ax * (2.0 * u[c] - u[c - ny] - u[c + ny]) + ay * (2.0 * u[c] - u[c - 1] - u[c + 1]);
                worst = worst.max((lap - f[c]).abs());
            }
        }
        worst
    }
}

/// Solves `−Δu = f` on the grid of `f` with `u = 0` on the boundary.
pub fn solve_poisson_2d(f: &Field2D) -> Result<Field2D> {
    let solver = Poisson2d::new(&f.x, &f.y)?;
    let u = solver.solve(&f.values)?;
    let r = solver.residual(&u, &f.values);
    let scale = f.values.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    if !(r <= 1e-10 * scale) {
        return Err(Error::NoConvergence {
            residual: r,
            iterations: 1,
        });
    }
    Field2D::new(f.x.clone(), f.y.clone(), u)
}
