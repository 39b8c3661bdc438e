use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{MultiAutoModel, Sensors};
use crate::rng;
use crate::stoch::{FunctionEnsemble, SensorGrid};
use crate::tensor::Tensor;

/// Smallest bandwidth used for a dimension without spread.
pub const BANDWIDTH_FLOOR: f64 = 1e-8;

/// Gaussian kernel density estimate with a diagonal bandwidth.
#[derive(Clone, Debug, PartialEq)]
pub struct KdeModel {
    /// Row-major `[n, dim]`.
    latents: Vec<f64>,
    dim: usize,
    bandwidth: Vec<f64>,
}

impl KdeModel {
    /// Builds a model with explicit per-dimension bandwidths.
    pub fn with_bandwidth(latents: Vec<f64>, dim: usize, bandwidth: Vec<f64>) -> Result<Self> {
        if dim == 0 || latents.is_empty() || latents.len() % dim != 0 {
            return Err(Error::invalid(format!("{} latent values do not split into rows of {dim}", latents.len())));
        }
        if bandwidth.len() != dim || bandwidth.iter().any(|&h| !(h > 0.0 && h.is_finite())) {
            return Err(Error::invalid(format!("bandwidths must be {dim} positive values: {bandwidth:?}")));
        }
        Ok(Self {
            latents,
            dim,
            bandwidth,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.latents.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    pub fn bandwidth(&self) -> &[f64] {
        &self.bandwidth
    }

    pub fn latent(&self, i: usize) -> &[f64] {
        &self.latents[i * self.dim..(i + 1) * self.dim]
    }

    /// Estimated density at `x`.
    pub fn density(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.dim);
        let norm: f64 = self
            .bandwidth
            .iter()
            .map(|h| h * (2.0 * std::f64::consts::PI).sqrt())
            .product();
        let sum: f64 = self
            .latents
            .chunks_exact(self.dim)
            .map(|c| {
                let q: f64 = c
                    .iter()
                    .zip(x)
                    .zip(&self.bandwidth)
                    .map(|((c, x), h)| ((x - c) / h).powi(2))
                    .sum();
                (-0.5 * q).exp()
            })
            .sum();
        sum / (norm * self.len() as f64)
    }
}

/// Fits a Gaussian KDE to `[n, dim]` latent codes with Scott's rule
/// `h_j = n^{-1/(dim+4)} · std_j`.
pub fn kde_fit(latents: &Tensor) -> Result<KdeModel> {
    let (n, dim) = match latents.shape() {
        &[n, d] => (n, d),
        s => return Err(Error::InvalidShape { shape: s.to_vec(), reason: "expected [n, dim] latents".into() }),
    };
    if n < 2 {
        return Err(Error::invalid(format!("kernel density estimate needs at least 2 samples, got {n}")));
    }
    let data = latents.data();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("latent codes".into()));
    }
    let factor = (n as f64).powf(-1.0 / (dim as f64 + 4.0));
    let bandwidth = (0..dim)
        .map(|j| {
            let col = || data.iter().skip(j).step_by(dim);
            let mean = col().sum::<f64>() / n as f64;
            let var = col().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let h = factor * var.sqrt();
            if h < BANDWIDTH_FLOOR {
                log::warn!("latent dimension {j} has no spread; bandwidth floored at {BANDWIDTH_FLOOR:e}");
                BANDWIDTH_FLOOR
            } else {
                h
            }
        })
        .collect();
    KdeModel::with_bandwidth(data.to_vec(), dim, bandwidth)
}

/// Draws `n` latent codes `[n, dim]`: a stored code chosen uniformly plus
/// Gaussian noise scaled by the bandwidth.
pub fn kde_sample(model: &KdeModel, n: usize, seed: u64) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::invalid("kde_sample needs n ≥ 1"));
    }
    let mut r = rng::stream(seed, "kde_sample", 0);
    let mut out = Vec::with_capacity(n * model.dim);
    for _ in 0..n {
        let i = r.random_range(0..model.len());
        for (c, h) in model.latent(i).iter().zip(&model.bandwidth) {
            let eta: f64 = r.sample(StandardNormal);
            out.push(c + h * eta);
        }
    }
    Tensor::new([n, model.dim], out)
}

/// Decodes latent codes `[n, latent]` through both heads, returning the
/// reconstructed inputs on `input_grid` and the solutions on `output_grid`.
/// The codes are stored as the ensembles' latent coordinates.
pub fn decode_latents(
    model: &MultiAutoModel,
    z: &Tensor,
    input_grid: &SensorGrid,
    output_grid: &SensorGrid,
) -> Result<(FunctionEnsemble, FunctionEnsemble)> {
    let width = model.latent_width();
    if z.rank() != 2 || z.shape()[1] != width {
        return Err(Error::ShapeMismatch {
            op: "decode_latents",
            lhs: z.shape().to_vec(),
            rhs: vec![0, width],
        });
    }
    let sensors = Sensors {
        unsup: input_grid.coordinates(),
        sup: output_grid.coordinates(),
    };
    let n = z.shape()[0];
    let (mut k, mut u) = (Vec::new(), Vec::new());
    for start in (0..n).step_by(512) {
        let end = (start + 512).min(n);
        let chunk = Tensor::new([end - start, width], z.data()[start * width..end * width].to_vec())?;
        let (kc, uc) = model.decode(&chunk, &sensors)?;
        k.extend(kc.into_data());
        u.extend(uc.into_data());
    }
    let k = FunctionEnsemble::new(input_grid.clone(), k)?.with_latent(width, z.data().to_vec())?;
    let u = FunctionEnsemble::new(output_grid.clone(), u)?.with_latent(width, z.data().to_vec())?;
    Ok((k, u))
}

/// Generates `n` synthetic `(k̃, ũ)` pairs by decoding KDE draws.
pub fn generate_ensemble(
    model: &MultiAutoModel,
    kde: &KdeModel,
    input_grid: &SensorGrid,
    output_grid: &SensorGrid,
    n: usize,
    seed: u64,
) -> Result<(FunctionEnsemble, FunctionEnsemble)> {
    if kde.dim() != model.latent_width() {
        return Err(Error::invalid(format!(
            "density has dimension {}, model latent width is {}",
            kde.dim(),
            model.latent_width()
        )));
    }
    if n == 0 {
        let width = model.latent_width();
        return Ok((
            FunctionEnsemble::new(input_grid.clone(), vec![])?.with_latent(width, vec![])?,
            FunctionEnsemble::new(output_grid.clone(), vec![])?.with_latent(width, vec![])?,
        ));
    }
    decode_latents(model, &kde_sample(kde, n, seed)?, input_grid, output_grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ArchConfig, ModelKind, ModelSpec};
    use crate::stoch::linspace;
    use libm::erf;

    fn normal_latents(n: usize, dim: usize, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, "test", 0);
        Tensor::new([n, dim], (0..n * dim).map(|_| r.sample(StandardNormal)).collect()).unwrap()
    }

    #[test]
    fn scott_bandwidth() {
        let z = Tensor::new([4, 2], vec![0.0, 1.0, 2.0, 1.0, 4.0, 1.0, 6.0, 1.0]).unwrap();
        let m = kde_fit(&z).unwrap();
        // std of (0,2,4,6) with n−1 is sqrt(20/3); the second column has none
        let h = 4f64.powf(-1.0 / 6.0) * (20.0f64 / 3.0).sqrt();
        assert!((m.bandwidth()[0] - h).abs() < 1e-14);
        assert_eq!(m.bandwidth()[1], BANDWIDTH_FLOOR);
    }

    #[test]
    fn needs_two_samples() {
        assert!(kde_fit(&Tensor::zeros([1, 3])).is_err());
        assert!(kde_fit(&Tensor::new([2, 1], vec![0.0, f64::NAN]).unwrap()).is_err());
    }

    #[test]
    fn single_cluster_stays_near_origin() {
        let z = normal_latents(50, 3, 1).map(|v| 1e-4 * v);
        let m = kde_fit(&z).unwrap();
        let s = kde_sample(&m, 1000, 0).unwrap();
        assert!(s.data().iter().all(|v| v.abs() < 2e-3));
    }

    #[test]
    fn standard_normal_density_at_zero() {
        let m = kde_fit(&normal_latents(10_000, 1, 2)).unwrap();
        let exact = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        let d = m.density(&[0.0]);
        assert!((d - exact).abs() < 0.1 * exact, "{d}");
    }

    #[test]
    fn fit_ignores_sample_order() {
        let z = normal_latents(200, 3, 3);
        let mut rows: Vec<usize> = (0..200).collect();
        rows.reverse();
        rows.swap(3, 170);
        let perm = Tensor::new([200, 3], rows.iter().flat_map(|&i| z.row(i).to_vec()).collect()).unwrap();
        let (a, b) = (kde_fit(&z).unwrap(), kde_fit(&perm).unwrap());
        for (x, y) in a.bandwidth().iter().zip(b.bandwidth()) {
            assert!((x - y).abs() < 1e-14 * x);
        }
        let q = [0.3, -0.2, 1.1];
        assert!((a.density(&q) - b.density(&q)).abs() < 1e-12 * a.density(&q));
    }

    #[test]
    fn vanishing_bandwidth_resamples() {
        let z = vec![-1.0, 0.5, 2.0, 7.0];
        let m = KdeModel::with_bandwidth(z.clone(), 1, vec![1e-12]).unwrap();
        let s = kde_sample(&m, 4000, 5).unwrap();
        let mut counts = [0usize; 4];
        for v in s.data() {
            let i = z.iter().position(|c| (c - v).abs() < 1e-9).expect("draw near a stored code");
            counts[i] += 1;
        }
        // each code expected 1000 times, sd ≈ 27
        assert!(counts.iter().all(|&c| (c as f64 - 1000.0).abs() < 150.0), "{counts:?}");
    }

    #[test]
    fn draw_mean_matches_data_mean() {
        let z = normal_latents(300, 2, 4).map(|v| 2.0 * v + 1.0);
        let m = kde_fit(&z).unwrap();
        let n = 100_000;
        let s = kde_sample(&m, n, 9).unwrap();
        for j in 0..2 {
            let col: Vec<f64> = z.data().iter().skip(j).step_by(2).copied().collect();
            let mean = col.iter().sum::<f64>() / 300.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 300.0;
            let draws = s.data().iter().skip(j).step_by(2).sum::<f64>() / n as f64;
            let tol = 4.0 * ((var + m.bandwidth()[j].powi(2)) / n as f64).sqrt();
            assert!((draws - mean).abs() < tol, "{draws} vs {mean} ± {tol}");
        }
    }

    #[test]
    fn seeded_draws_repeat() {
        let m = kde_fit(&normal_latents(30, 4, 6)).unwrap();
        assert_eq!(kde_sample(&m, 100, 3).unwrap(), kde_sample(&m, 100, 3).unwrap());
        assert_ne!(kde_sample(&m, 100, 3).unwrap(), kde_sample(&m, 100, 4).unwrap());
    }

    #[test]
    fn draws_follow_the_smoothed_cdf() {
        let z = normal_latents(40, 1, 7).map(|v| v * v);
        let m = kde_fit(&z).unwrap();
        let h = m.bandwidth()[0];
        let centers = z.data().to_vec();
        let cdf = |x: f64| {
            centers
                .iter()
                .map(|c| 0.5 * (1.0 + erf((x - c) / (h * std::f64::consts::SQRT_2))))
                .sum::<f64>()
                / centers.len() as f64
        };
        let mut s = kde_sample(&m, 100_000, 8).unwrap().into_data();
        let d = crate::uq::ks_statistic(&mut s, cdf);
        assert!(d < 0.02, "{d}");
    }

    fn tiny_model() -> (MultiAutoModel, FunctionEnsemble, FunctionEnsemble) {
        let g = SensorGrid::Line(linspace(0.0, 1.0, 8));
        let go = SensorGrid::Line(linspace(0.0, 1.0, 5));
        let k = FunctionEnsemble::new(g, (0..80).map(|i| (0.37 * i as f64).sin()).collect()).unwrap();
        let u = FunctionEnsemble::new(go, (0..50).map(|i| (0.21 * i as f64).cos()).collect()).unwrap();
        let arch = ArchConfig {
            latent: 3,
            p: 6,
            conv_channels: vec![2],
            conv_width: 3,
            encoder_hidden: vec![8],
            branch_hidden: vec![8],
            trunk_hidden: vec![8],
        };
        let spec = ModelSpec::fit(ModelKind::MultiAuto, &arch, &k, &u, (3, 3), 1).unwrap();
        (MultiAutoModel::new(spec).unwrap(), k, u)
    }

    #[test]
    fn empty_generation() {
        let (model, k, u) = tiny_model();
        let kde = kde_fit(&model.encode(&k.to_tensor().unwrap()).unwrap()).unwrap();
        let (gk, gu) = generate_ensemble(&model, &kde, k.grid(), u.grid(), 0, 0).unwrap();
        assert_eq!((gk.n_samples(), gu.n_samples()), (0, 0));
    }

    #[test]
    fn original_latents_reproduce_predictions() {
        let (model, k, u) = tiny_model();
        let z = model.encode(&k.to_tensor().unwrap()).unwrap();
        let (gk, gu) = decode_latents(&model, &z, k.grid(), u.grid()).unwrap();
        let (pk, pu) = model.predict_batch(&k.to_tensor().unwrap(), &Sensors::of(&k, &u)).unwrap();
        assert_eq!(gk.values(), pk.data());
        assert_eq!(gu.values(), pu.data());
        assert_eq!(gu.values(), model.predict_ensemble(&k, u.grid()).unwrap().values());
        assert_eq!(gu.latent(2).unwrap(), z.row(2));
    }

    #[test]
    fn generated_pairs_share_latents() {
        let (model, k, u) = tiny_model();
        let kde = kde_fit(&model.encode(&k.to_tensor().unwrap()).unwrap()).unwrap();
        let (gk, gu) = generate_ensemble(&model, &kde, k.grid(), u.grid(), 700, 2).unwrap();
        assert_eq!((gk.n_samples(), gu.n_samples()), (700, 700));
        assert_eq!(gk.latent(650), gu.latent(650));
        let wrong = KdeModel::with_bandwidth(vec![0.0; 4], 2, vec![1.0; 2]).unwrap();
        assert!(generate_ensemble(&model, &wrong, k.grid(), u.grid(), 1, 0).is_err());
    }
}
