use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{Axis, ExperimentConfig, Problem};
use crate::error::{Error, Result};
use crate::rng;
use crate::solvers::{kdv_solution, solve_growth_ode, solve_poisson_1d, Field2D, Poisson2d};
use crate::stoch::{gp_sample, kl_field_sample, kl_modes, FunctionEnsemble, SensorGrid};

/// Inputs and targets of one split. For the inverse problem the inputs are
/// solutions and the targets forcings.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: FunctionEnsemble,
    pub targets: FunctionEnsemble,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.n_samples()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

const CHUNK: usize = 250;

/// Indices of `sensors` inside the sorted `fine` grid.
fn locate(fine: &[f64], sensors: &[f64]) -> Result<Vec<usize>> {
    sensors
        .iter()
        .map(|&s| {
            let i = fine.partition_point(|&v| v < s - 1e-12);
            if i < fine.len() && (fine[i] - s).abs() <= 1e-12 {
                Ok(i)
            } else {
                Err(Error::invalid(format!("sensor {s} is not a node of the solve grid")))
            }
        })
        .collect()
}

fn union(parts: &[&[f64]]) -> Vec<f64> {
    let mut all: Vec<f64> = parts.iter().flat_map(|p| p.iter().copied()).collect();
    all.sort_by(f64::total_cmp);
    all.dedup_by(|a, b| (*a - *b).abs() <= 1e-12);
    all
}

fn pick(values: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| values[i]).collect()
}

fn rows_to_ensemble(grid: SensorGrid, rows: Vec<Vec<f64>>) -> Result<FunctionEnsemble> {
    FunctionEnsemble::new(grid, rows.concat())
}

/// Piecewise-linear interpolation of `(x, v)` at `q`; `x` sorted and `q`
/// inside its range.
fn interp(x: &[f64], v: &[f64], q: f64) -> f64 {
    let i = x.partition_point(|&a| a <= q).clamp(1, x.len() - 1);
    let a = (q - x[i - 1]) / (x[i] - x[i - 1]);
    v[i - 1] + a * (v[i] - v[i - 1])
}

/// Each trajectory lives on a path grid fixed by the output sensors, so the
/// paths do not depend on how many input sensors observe them. Inputs read
/// the piecewise-linear path, which is also what the trapezoid solve
/// integrates.
fn growth(config: &ExperimentConfig, n: usize, seed: u64) -> Result<Dataset> {
    let (ig, og) = (config.input_grid[0], config.output_grid[0]);
    let (tin, tout) = (ig.points(), og.points());
    let end = ig.hi.max(og.hi);
    if ig.lo < 0.0 {
        return Err(Error::invalid("growth input sensors must lie in [0, end]"));
    }
    let dense = Axis::new(0.0, end, config.refine * (og.n - 1).max(1) + 1).points();
    let path = union(&[&[0.0], &tout, &dense]);
    let oi = locate(&path, &tout)?;
    let path_grid = SensorGrid::Line(path.clone());
    let (lo, hi) = (config.kernel.length, config.kernel.length_max.unwrap_or(config.kernel.length));
    let traj: Vec<(Vec<f64>, Vec<f64>, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let s = rng::derive_seed(seed, "trajectory", i as u64);
            let length = if hi > lo {
                rng::stream(s, "length", 0).random_range(lo..hi)
            } else {
                lo
            };
            let k = gp_sample(&|_| 0.0, &config.kernel.spec(length)?, &path_grid, 1, s)?;
            let k = k.sample(0);
            let u = solve_growth_ode(&path, k)?;
            let observed = tin.iter().map(|&t| interp(&path, k, t)).collect();
            Ok((observed, pick(&u, &oi), length))
        })
        .collect::<Result<_>>()?;
    let lengths = traj.iter().map(|t| t.2).collect();
    let (k, u): (Vec<_>, Vec<_>) = traj.into_iter().map(|(k, u, _)| (k, u)).unzip();
    Ok(Dataset {
        inputs: rows_to_ensemble(SensorGrid::Line(tin), k)?.with_latent(1, lengths)?,
        targets: rows_to_ensemble(SensorGrid::Line(tout), u)?,
    })
}

/// Forcing samples on the refined grid, in chunks with their own streams.
fn forcing_chunks(
    config: &ExperimentConfig,
    mean: &(dyn Fn(&[f64]) -> f64 + Sync),
    grid: &SensorGrid,
    n: usize,
    seed: u64,
) -> Result<Vec<FunctionEnsemble>> {
    let kernel = config.kernel.spec(config.kernel.length)?;
    (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let m = CHUNK.min(n - c * CHUNK);
            gp_sample(mean, &kernel, grid, m, rng::derive_seed(seed, "forcing", c as u64))
        })
        .collect()
}

fn poisson1d(config: &ExperimentConfig, n: usize, seed: u64) -> Result<Dataset> {
    let axis = config.input_grid[0];
    let fine = axis.refined(config.refine).points();
    let step = config.refine;
    let grid = SensorGrid::Line(axis.points());
    let chunks = forcing_chunks(
        config,
        &|p| (std::f64::consts::PI * p[0]).sin(),
        &SensorGrid::Line(fine.clone()),
        n,
        seed,
    )?;
    let (mut us, mut fs) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for f in &chunks {
        for i in 0..f.n_samples() {
            let u = solve_poisson_1d(&fine, f.sample(i))?;
            us.push(u.iter().step_by(step).copied().collect::<Vec<_>>());
            fs.push(f.sample(i).iter().step_by(step).copied().collect::<Vec<_>>());
        }
    }
    Ok(Dataset {
        inputs: rows_to_ensemble(grid.clone(), us)?,
        targets: rows_to_ensemble(grid, fs)?,
    })
}

fn poisson2d(config: &ExperimentConfig, n: usize, seed: u64) -> Result<Dataset> {
    let (ax, ay) = (config.input_grid[0], config.input_grid[1]);
    let (fx, fy) = (ax.refined(config.refine).points(), ay.refined(config.refine).points());
    let solver = Poisson2d::new(&fx, &fy)?;
    let fine = SensorGrid::Tensor {
        x: fx.clone(),
        y: fy.clone(),
    };
    let chunks = forcing_chunks(
        config,
        &|p| 20.0 * (std::f64::consts::PI * (p[0] + p[1])).sin(),
        &fine,
        n,
        seed,
    )?;
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = chunks
        .par_iter()
        .flat_map_iter(|f| (0..f.n_samples()).map(move |i| f.sample(i).to_vec()))
        .map(|f| {
            let u = solver.solve(&f)?;
            let coarse = |v: Vec<f64>| -> Result<Vec<f64>> {
                Ok(Field2D::new(fx.clone(), fy.clone(), v)?.restrict(config.refine)?.values)
            };
            Ok((coarse(f)?, coarse(u)?))
        })
        .collect::<Result<_>>()?;
    let grid = super::config::grid_of(&config.input_grid)?;
    let (f, u): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    Ok(Dataset {
        inputs: rows_to_ensemble(grid.clone(), f)?,
        targets: rows_to_ensemble(grid, u)?,
    })
}

fn kdv(config: &ExperimentConfig, n: usize, seed: u64) -> Result<Dataset> {
    let axis = config.input_grid[0];
    let fine = axis.refined(config.refine).points();
    let kernel = config.kernel.spec(config.kernel.length)?;
    let basis = kl_modes(&kernel, &SensorGrid::Line(fine.clone()), config.kl.modes)?;
    let forcing = kl_field_sample(&basis, config.kl.sigma, n, rng::derive_seed(seed, "forcing", 0))?;
    let (x, t) = (config.output_grid[0].points(), config.output_grid[1].points());
    let u: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| Ok(kdv_solution(&fine, forcing.sample(i), &x, &t)?.values))
        .collect::<Result<_>>()?;
    let f: Vec<Vec<f64>> = (0..n)
        .map(|i| forcing.sample(i).iter().step_by(config.refine).copied().collect())
        .collect();
    let d = config.kl.modes;
    let omega: Vec<f64> = (0..n).flat_map(|i| forcing.latent(i).unwrap().to_vec()).collect();
    Ok(Dataset {
        inputs: rows_to_ensemble(SensorGrid::Line(axis.points()), f)?.with_latent(d, omega)?,
        targets: rows_to_ensemble(SensorGrid::Tensor { x, y: t }, u)?,
    })
}

/// Simulates `n` input/target pairs for the configured problem.
pub fn simulate(config: &ExperimentConfig, n: usize, seed: u64) -> Result<Dataset> {
    config.validate()?;
    if n == 0 {
        return Err(Error::invalid("dataset needs at least one trajectory"));
    }
    let data = match config.problem {
        Problem::GrowthOde => growth(config, n, seed),
        Problem::Poisson1dInverse => poisson1d(config, n, seed),
        Problem::Poisson2dForward => poisson2d(config, n, seed),
        Problem::KdvForward => kdv(config, n, seed),
    }?;
    if data.inputs.values().iter().chain(data.targets.values()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{} dataset", config.problem)));
    }
    Ok(data)
}

/// Seeds of the training and test splits.
pub fn split_seeds(seed: u64) -> (u64, u64) {
    (rng::derive_seed(seed, "train-data", 0), rng::derive_seed(seed, "test-data", 0))
}

pub const DATA_FILES: [&str; 4] = [
    "data/train_inputs.bin",
    "data/train_targets.bin",
    "data/test_inputs.bin",
    "data/test_targets.bin",
];

/// Self-description of a run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub version: String,
    /// Relative path → SHA-256 of the file contents.
    pub files: BTreeMap<String, String>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        if !path.exists() {
            return Err(Error::MissingFile(path));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path,
            reason: e.to_string(),
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Re-hashes every listed file under `dir`.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for (name, hash) in &self.files {
            let path = dir.join(name);
            if sha256_file(&path)? != *hash {
                return Err(Error::Format {
                    path,
                    reason: "content hash differs from the manifest".into(),
                });
            }
        }
        Ok(())
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Training and test splits of a run directory.
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn write_splits(dir: &Path, splits: &Splits) -> Result<()> {
    let data = dir.join("data");
    std::fs::create_dir_all(&data).map_err(|e| Error::io(&data, e))?;
    let [a, b, c, d] = DATA_FILES;
    splits.train.inputs.write_binary(&dir.join(a))?;
    splits.train.targets.write_binary(&dir.join(b))?;
    splits.test.inputs.write_binary(&dir.join(c))?;
    splits.test.targets.write_binary(&dir.join(d))
}

pub fn read_splits(dir: &Path) -> Result<Splits> {
    let [a, b, c, d] = DATA_FILES.map(|f| dir.join(f));
    Ok(Splits {
        train: Dataset {
            inputs: FunctionEnsemble::read_binary(&a)?,
            targets: FunctionEnsemble::read_binary(&b)?,
        },
        test: Dataset {
            inputs: FunctionEnsemble::read_binary(&c)?,
            targets: FunctionEnsemble::read_binary(&d)?,
        },
    })
}
