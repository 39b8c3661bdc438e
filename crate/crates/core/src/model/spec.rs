use serde::{Deserialize, Serialize};

use crate::baselines::{binomial, pca_fit, PcaProjection};
use crate::error::{Error, Result};
use crate::stoch::{FunctionEnsemble, SensorGrid};
use crate::tensor::Tensor;

/// Layer sizes shared by every encoder/decoder variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub latent: usize,
    /// Basis width of the branch and both trunks.
    pub p: usize,
    pub conv_channels: Vec<usize>,
    pub conv_width: usize,
    /// Hidden dense widths between the flattened convolution output and `z`.
    pub encoder_hidden: Vec<usize>,
    pub branch_hidden: Vec<usize>,
    pub trunk_hidden: Vec<usize>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            latent: 10,
            p: 60,
            conv_channels: vec![8, 16],
            conv_width: 5,
            encoder_hidden: vec![64],
            branch_hidden: vec![60, 60],
            trunk_hidden: vec![60, 60],
        }
    }
}

/// `(v − shift) / scale` and back.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub shift: f64,
    pub scale: f64,
}

impl Default for Affine {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        shift: 0.0,
        scale: 1.0,
    };

    /// Mean and standard deviation over every value.
    pub fn fit(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let shift = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - shift).powi(2)).sum::<f64>() / n;
        let scale = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        Self { shift, scale }
    }

    pub fn forward(&self, v: f64) -> f64 {
        (v - self.shift) / self.scale
    }

    pub fn inverse(&self, v: f64) -> f64 {
        v * self.scale + self.shift
    }
}

/// Per-sensor centering by the training mean followed by one global scale:
/// `(v(x) − μ(x)) / s`.
///
/// `μ` is stored on the training grid and interpolated (multilinear,
/// clamped to the grid box) at other query points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldNorm {
    pub grid: SensorGrid,
    pub mean: Vec<f64>,
    pub scale: f64,
}

fn interval(x: &[f64], q: f64) -> (usize, f64) {
    if x.len() == 1 || q <= x[0] {
        return (0, 0.0);
    }
    let n = x.len();
    if q >= x[n - 1] {
        return (n - 2, 1.0);
    }
    let i = x.partition_point(|&v| v <= q) - 1;
    (i, (q - x[i]) / (x[i + 1] - x[i]))
}

impl FieldNorm {
    pub fn identity(grid: SensorGrid) -> Self {
        let mean = vec![0.0; grid.len()];
        Self { grid, mean, scale: 1.0 }
    }

    /// Pointwise mean and the root mean square of the centered values.
    pub fn fit(e: &FunctionEnsemble) -> Self {
        let mean = e.mean();
        let n = e.values().len().max(1) as f64;
        let ss: f64 = (0..e.n_samples())
            .flat_map(|i| e.sample(i).iter().zip(&mean).map(|(v, m)| (v - m).powi(2)))
            .sum();
        let s = (ss / n).sqrt();
        Self {
            grid: e.grid().clone(),
            mean,
            scale: if s > 1e-12 { s } else { 1.0 },
        }
    }

    fn mean_at_point(&self, p: &[f64]) -> f64 {
        match &self.grid {
            SensorGrid::Line(x) => {
                let (i, a) = interval(x, p[0]);
                let hi = (i + 1).min(x.len() - 1);
                (1.0 - a) * self.mean[i] + a * self.mean[hi]
            }
            SensorGrid::Tensor { x, y } => {
                let ny = y.len();
                let (i, a) = interval(x, p[0]);
                let (j, b) = interval(y, p[1]);
                let (i1, j1) = ((i + 1).min(x.len() - 1), (j + 1).min(ny - 1));
                let m = |i: usize, j: usize| self.mean[i * ny + j];
                (1.0 - a) * ((1.0 - b) * m(i, j) + b * m(i, j1)) + a * ((1.0 - b) * m(i1, j) + b * m(i1, j1))
            }
        }
    }

    /// `μ` at each row of `coords: [S, d]`.
    pub fn mean_at(&self, coords: &Tensor) -> Result<Vec<f64>> {
        let d = self.grid.dim();
        if coords.rank() != 2 || coords.shape()[1] != d {
            return Err(Error::ShapeMismatch {
                op: "FieldNorm::mean_at",
                lhs: vec![0, d],
                rhs: coords.shape().to_vec(),
            });
        }
        if *coords == self.grid.coordinates() {
            return Ok(self.mean.clone());
        }
        Ok((0..coords.shape()[0]).map(|r| self.mean_at_point(coords.row(r))).collect())
    }

    /// Normalizes every row of `values: [B, S]` against the means `mu` of its
    /// `S` sensors.
    pub fn forward(&self, values: &Tensor, mu: &[f64]) -> Tensor {
        let mut out = values.clone();
        for row in out.data_mut().chunks_mut(mu.len()) {
            for (v, m) in row.iter_mut().zip(mu) {
                *v = (*v - m) / self.scale;
            }
        }
        out
    }

    pub fn inverse(&self, values: &Tensor, mu: &[f64]) -> Tensor {
        let mut out = values.clone();
        for row in out.data_mut().chunks_mut(mu.len()) {
            for (v, m) in row.iter_mut().zip(mu) {
                *v = *v * self.scale + m;
            }
        }
        out
    }
}

/// How input functions are reduced to the branch input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "type")]
pub enum EncoderSpec {
    /// Trainable convolution + dense stack.
    Conv,
    /// Frozen whitened principal components of the normalized inputs.
    Pca { projection: PcaProjection },
}

/// How the latent code is turned into the shared basis `φ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "type")]
pub enum BasisSpec {
    /// Trainable dense branch net.
    Branch,
    /// Frozen Legendre chaos of degree `q` in the latent coordinates, mapped
    /// to `[−1, 1]` through the Gaussian CDF.
    Pce { q: usize },
}

/// The model families that share the two-head decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    MultiAuto,
    Pca,
    Pce,
}

/// Everything needed to rebuild a model's architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: ArchConfig,
    pub encoder: EncoderSpec,
    pub basis: BasisSpec,
    /// `[n]` for a sampled curve, `[nx, ny]` for an image.
    pub input_extents: Vec<usize>,
    /// Per-coordinate `[lo, hi]` of each trunk's query domain, mapped to
    /// `[−1, 1]` before the trunk net.
    pub unsup_box: Vec<[f64; 2]>,
    pub sup_box: Vec<[f64; 2]>,
    pub input_norm: FieldNorm,
    pub output_norm: FieldNorm,
    pub seed: u64,
}

fn bounding_box(grid: &SensorGrid) -> Vec<[f64; 2]> {
    (0..grid.dim())
        .map(|k| {
            let (lo, hi) = grid.points().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                (lo.min(p[k]), hi.max(p[k]))
            });
            if hi > lo {
                [lo, hi]
            } else {
                [lo - 1.0, lo + 1.0]
            }
        })
        .collect()
}

impl ModelSpec {
    /// Spec fitted to training data: normalizers, trunk domains and, for the
    /// PCA and PCE kinds, the principal components of the inputs.
    ///
    /// PCE uses `pce_dim` whitened components as its chaos variables and
    /// fixes `p` to the basis size.
    pub fn fit(
        kind: ModelKind,
        arch: &ArchConfig,
        inputs: &FunctionEnsemble,
        targets: &FunctionEnsemble,
        pce: (usize, usize),
        seed: u64,
    ) -> Result<Self> {
        if inputs.n_samples() != targets.n_samples() {
            return Err(Error::invalid(format!(
                "{} inputs but {} targets",
                inputs.n_samples(),
                targets.n_samples()
            )));
        }
        let input_norm = FieldNorm::fit(inputs);
        let output_norm = FieldNorm::fit(targets);
        let mut arch = arch.clone();
        let normalized = || {
            let v = input_norm.forward(&inputs.to_tensor()?, &input_norm.mean);
            FunctionEnsemble::new(inputs.grid().clone(), v.into_data())
        };
        let (encoder, basis) = match kind {
            ModelKind::MultiAuto => (EncoderSpec::Conv, BasisSpec::Branch),
            ModelKind::Pca => (
                EncoderSpec::Pca {
                    projection: pca_fit(&normalized()?, arch.latent)?,
                },
                BasisSpec::Branch,
            ),
            ModelKind::Pce => {
                let (d, q) = pce;
                arch.latent = d;
                arch.p = binomial(d + q, q);
                (
                    EncoderSpec::Pca {
                        projection: pca_fit(&normalized()?, d)?,
                    },
                    BasisSpec::Pce { q },
                )
            }
        };
        let spec = Self {
            arch,
            encoder,
            basis,
            input_extents: inputs.grid().extents(),
            unsup_box: bounding_box(inputs.grid()),
            sup_box: bounding_box(targets.grid()),
            input_norm,
            output_norm,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn kind(&self) -> ModelKind {
        match (&self.encoder, &self.basis) {
            (EncoderSpec::Conv, _) => ModelKind::MultiAuto,
            (EncoderSpec::Pca { .. }, BasisSpec::Branch) => ModelKind::Pca,
            (EncoderSpec::Pca { .. }, BasisSpec::Pce { .. }) => ModelKind::Pce,
        }
    }

    pub fn n_inputs(&self) -> usize {
        self.input_extents.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.arch;
        if a.latent == 0 || a.p == 0 || a.conv_width == 0 {
            return Err(Error::invalid("latent width, p and conv width must be positive"));
        }
        if !(1..=2).contains(&self.input_extents.len()) || self.n_inputs() == 0 {
            return Err(Error::invalid(format!("unsupported input extents {:?}", self.input_extents)));
        }
        if self.unsup_box.is_empty() || self.sup_box.is_empty() {
            return Err(Error::invalid("trunk domains must have at least one coordinate"));
        }
        for (name, n) in [("input", &self.input_norm), ("output", &self.output_norm)] {
            if n.mean.len() != n.grid.len() || !(n.scale > 0.0) {
                return Err(Error::invalid(format!("malformed {name} normalizer")));
            }
        }
        if self.input_norm.grid.len() != self.n_inputs() {
            return Err(Error::invalid("input normalizer does not match the input grid"));
        }
        match (&self.encoder, &self.basis) {
            (EncoderSpec::Conv, BasisSpec::Pce { .. }) => {
                return Err(Error::invalid("a PCE basis needs fixed (PCA) latent coordinates"))
            }
            (EncoderSpec::Pca { projection }, basis) => {
                if projection.n_sensors() != self.n_inputs() || projection.retained() != a.latent {
                    return Err(Error::invalid("PCA projection does not match input or latent width"));
                }
                if let BasisSpec::Pce { q } = basis {
                    if a.p != binomial(a.latent + q, *q) {
                        return Err(Error::invalid("p must equal the PCE basis size"));
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }
}
