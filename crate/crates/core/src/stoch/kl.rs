use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng as _;
use rand_distr::StandardNormal;

use super::kernel::gram_matrix;
use super::{FunctionEnsemble, KernelSpec, SensorGrid};
use crate::error::{Error, Result};
use crate::rng;

/// Leading Karhunen–Loève pairs of a kernel on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct KlBasis {
    /// Descending, nonnegative.
    pub eigenvalues: Vec<f64>,
    /// `eigenfunctions[i]` holds mode `i` at every grid point.
    pub eigenfunctions: Vec<Vec<f64>>,
    pub grid: SensorGrid,
    pub weights: Vec<f64>,
    /// Quadrature trace of the kernel, the sum of all eigenvalues.
    pub trace: f64,
}

/// Nyström discretization: eigenpairs of `W^½ K W^½` with trapezoid
/// weights, mapped back through `W^-½`. Each returned eigenfunction has unit
/// quadrature norm and a positive first nonzero entry.
pub fn kl_modes(kernel: &KernelSpec, grid: &SensorGrid, retain: usize) -> Result<KlBasis> {
    let m = grid.len();
    if retain == 0 || retain > m {
        return Err(Error::invalid(format!(
            "cannot retain {retain} KL modes on a grid of {m} points"
        )));
    }
    let k = gram_matrix(kernel, grid)?;
    let w = grid.quadrature_weights();
    let sw: Vec<f64> = w.iter().map(|v| v.sqrt()).collect();
    let a = DMatrix::from_fn(m, m, |i, j| sw[i] * k[(i, j)] * sw[j]);
    let trace = (0..m).map(|i| a[(i, i)]).sum();
    let eig = SymmetricEigen::new(a);

    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let mut eigenvalues = Vec::with_capacity(retain);
    let mut eigenfunctions = Vec::with_capacity(retain);
    for &c in order.iter().take(retain) {
        // roundoff can leave tiny negative values on a PSD matrix
        eigenvalues.push(eig.eigenvalues[c].max(0.0));
        let mut e: Vec<f64> = (0..m).map(|i| eig.eigenvectors[(i, c)] / sw[i]).collect();
        let big = e.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        if let Some(first) = e.iter().find(|v| v.abs() > 1e-10 * big) {
            if *first < 0.0 {
                e.iter_mut().for_each(|v| *v = -*v);
            }
        }
        eigenfunctions.push(e);
    }
    Ok(KlBasis {
        eigenvalues,
        eigenfunctions,
        grid: grid.clone(),
        weights: w,
        trace,
    })
}

impl KlBasis {
    pub fn retained(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Share of the total variance carried by the retained modes.
    pub fn captured_fraction(&self) -> f64 {
        if self.trace == 0.0 {
            return 1.0;
        }
        self.eigenvalues.iter().sum::<f64>() / self.trace
    }

    /// `Σ_i sqrt(λ_i) e_i ξ_i` on the grid.
    pub fn synthesize(&self, xi: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.grid.len()];
        for ((lam, e), x) in self.eigenvalues.iter().zip(&self.eigenfunctions).zip(xi) {
            let c = lam.sqrt() * x;
            for (o, v) in out.iter_mut().zip(e) {
                *o += c * v;
            }
        }
        out
    }

    /// Standardized coordinates `ξ_i = e_iᵀ W (f − mean) / sqrt(λ_i)`.
    /// Modes with zero eigenvalue get coordinate 0.
    pub fn project(&self, values: &[f64], mean: &[f64]) -> Vec<f64> {
        self.eigenvalues
            .iter()
            .zip(&self.eigenfunctions)
            .map(|(lam, e)| {
                if *lam <= 0.0 {
                    return 0.0;
                }
                let dot: f64 = (0..e.len())
                    .map(|j| self.weights[j] * e[j] * (values[j] - mean[j]))
                    .sum();
                dot / lam.sqrt()
            })
            .collect()
    }
}

/// Samples `σ Σ sqrt(λ_i) e_i ω_i` with independent standard normal `ω`.
/// The `ω` are stored as the ensemble's latent coordinates.
pub fn kl_field_sample(basis: &KlBasis, sigma: f64, n: usize, seed: u64) -> Result<FunctionEnsemble> {
    if n == 0 {
        return Err(Error::invalid("kl_field_sample needs at least one sample"));
    }
    let d = basis.retained();
    let mut r = rng::stream(seed, "kl_field_sample", 0);
    let omega: Vec<f64> = (0..n * d).map(|_| r.sample(StandardNormal)).collect();
    kl_field_from_coords(basis, sigma, &omega)
}

/// Deterministic counterpart of [`kl_field_sample`] for given coordinates,
/// laid out row-major `[n, retained]`.
pub fn kl_field_from_coords(basis: &KlBasis, sigma: f64, omega: &[f64]) -> Result<FunctionEnsemble> {
    let d = basis.retained();
    if omega.len() % d != 0 {
        return Err(Error::invalid("coordinate count is not a multiple of the retained modes"));
    }
    let values: Vec<f64> = omega
        .chunks(d)
        .flat_map(|w| basis.synthesize(w).into_iter().map(move |v| sigma * v))
        .collect();
    FunctionEnsemble::new(basis.grid.clone(), values)?.with_latent(d, omega.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Cyclic Jacobi eigenvalues, independent of the library's eigensolver.
    fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
        let n = a.len();
        for _sweep in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a[i][j] * a[i][j])
                .sum();
            if off < 1e-28 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (akp, akq) = (a[k][p], a[k][q]);
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[p][k], a[q][k]);
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
        ev.sort_by(|x, y| y.total_cmp(x));
        ev
    }

    fn se() -> KernelSpec {
        KernelSpec::squared_exponential(1.0, 1.5).unwrap()
    }

    #[test]
    fn top_five_modes_capture_the_trace() {
        let g = SensorGrid::uniform(-1.0, 1.0, 101);
        let basis = kl_modes(&se(), &g, 5).unwrap();

        // oracle: dense eigenvalues of W^½ K W^½ assembled by hand
        let x = match &g {
            SensorGrid::Line(x) => x.clone(),
            _ => unreachable!(),
        };
        let h = x[1] - x[0];
        let w: Vec<f64> = (0..101).map(|i| if i == 0 || i == 100 { h / 2.0 } else { h }).collect();
        let a: Vec<Vec<f64>> = (0..101)
            .map(|i| {
                (0..101)
                    .map(|j| {
                        let r = x[i] - x[j];
                        (w[i] * w[j]).sqrt() * (-r * r / (2.0 * 1.5 * 1.5)).exp()
                    })
                    .collect()
            })
            .collect();
        let trace: f64 = (0..101).map(|i| a[i][i]).sum();
        let oracle = jacobi_eigenvalues(a);
        let top5: f64 = oracle[..5].iter().sum();
        assert!(top5 / trace >= 0.99, "oracle capture {}", top5 / trace);
        for i in 0..5 {
            assert!((basis.eigenvalues[i] - oracle[i]).abs() < 1e-8 * oracle[0], "mode {i}");
        }
        assert!((basis.trace - trace).abs() < 1e-12 * trace);
        assert!(basis.captured_fraction() >= 0.99);
    }

    #[test]
    fn full_spectrum_reconstructs_kernel() {
        for (kernel, g) in [
            (se(), SensorGrid::uniform(-1.0, 1.0, 41)),
            (KernelSpec::exponential(0.5, 0.25).unwrap(), SensorGrid::uniform(0.0, 0.1, 30)),
            (se(), SensorGrid::uniform_2d((-1.0, 1.0, 5), (-1.0, 1.0, 6))),
        ] {
            let m = g.len();
            let basis = kl_modes(&kernel, &g, m).unwrap();
            let k = gram_matrix(&kernel, &g).unwrap();
            let mut rec = DMatrix::<f64>::zeros(m, m);
            for (lam, e) in basis.eigenvalues.iter().zip(&basis.eigenfunctions) {
                for i in 0..m {
                    for j in 0..m {
                        rec[(i, j)] += lam * e[i] * e[j];
                    }
                }
            }
            let rel = (rec - &k).norm() / k.norm();
            assert!(rel < 1e-8, "{rel}");

            let total: f64 = basis.eigenvalues.iter().sum();
            assert!((total - basis.trace).abs() < 1e-8 * basis.trace);
            assert!(basis.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
            assert!(basis.eigenvalues.iter().all(|&l| l >= 0.0));
        }
    }

    #[test]
    fn eigenfunctions_orthonormal_with_sign_convention() {
        let g = SensorGrid::uniform(0.0, 1.0, 60);
        let basis = kl_modes(&KernelSpec::exponential(1.0, 0.3).unwrap(), &g, 6).unwrap();
        for a in 0..6 {
            let first = basis.eigenfunctions[a].iter().find(|v| v.abs() > 1e-12).unwrap();
            assert!(*first > 0.0);
            for b in 0..6 {
                let ip: f64 = (0..60)
                    .map(|i| basis.weights[i] * basis.eigenfunctions[a][i] * basis.eigenfunctions[b][i])
                    .sum();
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((ip - expect).abs() < 1e-8, "({a},{b}) {ip}");
            }
        }
    }

    #[test]
    fn retain_bounds_checked() {
        let g = SensorGrid::uniform(0.0, 1.0, 4);
        assert!(kl_modes(&se(), &g, 5).is_err());
        assert!(kl_modes(&se(), &g, 0).is_err());
    }

    #[test]
    fn forced_single_mode_sample() {
        let g = SensorGrid::uniform(0.0, 0.1, 20);
        let basis = kl_modes(&KernelSpec::exponential(1.0, 0.25).unwrap(), &g, 1).unwrap();
        let e = kl_field_from_coords(&basis, 0.1, &[1.0]).unwrap();
        for i in 0..20 {
            let expect = 0.1 * basis.eigenvalues[0].sqrt() * basis.eigenfunctions[0][i];
            assert!((e.sample(0)[i] - expect).abs() < 1e-15);
        }
        let z = kl_field_sample(&basis, 0.0, 3, 1).unwrap();
        assert!(z.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn projection_inverts_synthesis() {
        let g = SensorGrid::uniform(-1.0, 1.0, 50);
        let basis = kl_modes(&se(), &g, 4).unwrap();
        let xi = [0.3, -1.2, 0.8, 2.0];
        let f = basis.synthesize(&xi);
        let back = basis.project(&f, &vec![0.0; 50]);
        for (a, b) in xi.iter().zip(&back) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn sample_covariance_matches_truncated_kernel() {
        let g = SensorGrid::uniform(0.0, 0.1, 12);
        let kernel = KernelSpec::exponential(1.0, 0.25).unwrap();
        let basis = kl_modes(&kernel, &g, 3).unwrap();
        let sigma = 0.1;
        let n = 100_000;
        let e = kl_field_sample(&basis, sigma, n, 4).unwrap();
        assert_eq!(e.latent_width(), 3);

        let m = g.len();
        let mut trunc = DMatrix::<f64>::zeros(m, m);
        for (lam, f) in basis.eigenvalues.iter().zip(&basis.eigenfunctions) {
            for i in 0..m {
                for j in 0..m {
                    trunc[(i, j)] += sigma * sigma * lam * f[i] * f[j];
                }
            }
        }
        let mut cov = DMatrix::<f64>::zeros(m, m);
        for s in 0..n {
            let v = e.sample(s);
            for i in 0..m {
                for j in 0..m {
                    cov[(i, j)] += v[i] * v[j] / n as f64;
                }
            }
        }
        let rel = (&cov - &trunc).norm() / trunc.norm();
        assert!(rel < 0.03, "{rel}");
        // the truncation is visible against the full kernel
        let full = gram_matrix(&KernelSpec::exponential(sigma, 0.25).unwrap(), &g).unwrap();
        let gap = (&trunc - &full).norm() / full.norm();
        assert!(gap > 0.0);
    }
}
