use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ArchConfig, TrainConfig};
use crate::stoch::{linspace, KernelFamily, KernelSpec, SensorGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Problem {
    /// `du/dt = k u` on `[0, 1]` with a Gaussian-process rate `k`.
    GrowthOde,
    /// Recover the forcing of `−u″ = f` on `[−1, 1]` from `u`.
    Poisson1dInverse,
    /// `−Δu = f` on `[−1, 1]²`.
    Poisson2dForward,
    /// KdV soliton driven by a time-dependent additive forcing.
    KdvForward,
}

impl fmt::Display for Problem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Problem::GrowthOde => "growth-ode",
            Problem::Poisson1dInverse => "poisson1d-inverse",
            Problem::Poisson2dForward => "poisson2d-forward",
            Problem::KdvForward => "kdv-forward",
        })
    }
}

impl FromStr for Problem {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::invalid(format!("unknown problem {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelChoice {
    #[serde(rename = "multiauto")]
    MultiAuto,
    #[serde(rename = "deeponet")]
    DeepOnet,
    Pca,
    Pce,
}

impl ModelChoice {
    pub const ALL: [ModelChoice; 4] = [ModelChoice::MultiAuto, ModelChoice::DeepOnet, ModelChoice::Pca, ModelChoice::Pce];

    pub fn name(self) -> &'static str {
        match self {
            ModelChoice::MultiAuto => "multiauto",
            ModelChoice::DeepOnet => "deeponet",
            ModelChoice::Pca => "pca",
            ModelChoice::Pce => "pce",
        }
    }

    /// Label used in comparison tables.
    pub fn label(self) -> &'static str {
        match self {
            ModelChoice::MultiAuto => "MultiAuto-DeepONet",
            ModelChoice::DeepOnet => "DeepONet",
            ModelChoice::Pca => "PCA-DeepONet",
            ModelChoice::Pce => "PCE-DeepONet",
        }
    }
}

impl fmt::Display for ModelChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown model {s:?}; expected multiauto, deeponet, pca or pce")))
    }
}

/// Uniform sensor axis `linspace(lo, hi, n)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Axis {
    pub fn new(lo: f64, hi: f64, n: usize) -> Self {
        Self { lo, hi, n }
    }

    pub fn points(&self) -> Vec<f64> {
        linspace(self.lo, self.hi, self.n)
    }

    /// The axis with `factor − 1` extra points in every interval.
    pub fn refined(&self, factor: usize) -> Axis {
        Axis::new(self.lo, self.hi, factor * (self.n - 1) + 1)
    }
}

/// Sensor grid from one or two axes.
pub fn grid_of(axes: &[Axis]) -> Result<SensorGrid> {
    match axes {
        [a] => Ok(SensorGrid::Line(a.points())),
        [a, b] => Ok(SensorGrid::Tensor {
            x: a.points(),
            y: b.points(),
        }),
        _ => Err(Error::invalid(format!("grids have one or two axes, got {}", axes.len()))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelConfig {
    pub family: KernelFamily,
    pub sigma: f64,
    pub length: f64,
    /// When set, each trajectory draws its correlation length uniformly
    /// from `[length, length_max]`.
    pub length_max: Option<f64>,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            family: KernelFamily::SquaredExponential,
            sigma: 1.0,
            length: 1.0,
            length_max: None,
        }
    }
}

impl KernelConfig {
    pub fn spec(&self, length: f64) -> Result<KernelSpec> {
        KernelSpec::new(self.family, self.sigma, length)
    }
}

/// Karhunen–Loève forcing used by the KdV problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KlConfig {
    pub modes: usize,
    pub sigma: f64,
}

impl Default for KlConfig {
    fn default() -> Self {
        Self { modes: 3, sigma: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PceConfig {
    /// Number of chaos variables (leading whitened principal components).
    pub dim: usize,
    pub order: usize,
}

impl Default for PceConfig {
    fn default() -> Self {
        Self { dim: 3, order: 3 }
    }
}

/// Vanilla DeepONet baseline fed with Karhunen–Loève features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeepOnetConfig {
    pub modes: usize,
    pub p: usize,
    pub branch_hidden: Vec<usize>,
    pub trunk_hidden: Vec<usize>,
}

impl Default for DeepOnetConfig {
    fn default() -> Self {
        Self {
            modes: 5,
            p: 60,
            branch_hidden: vec![60, 60],
            trunk_hidden: vec![60, 60],
        }
    }
}

/// One experiment: data, model, training and evaluation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub problem: Problem,
    pub kernel: KernelConfig,
    pub kl: KlConfig,
    /// Axes of the encoder's input sensors.
    pub input_grid: Vec<Axis>,
    /// Axes of the solution head's sensors.
    pub output_grid: Vec<Axis>,
    /// Refinement of the reference-solve grid relative to the sensors.
    pub refine: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub pce: PceConfig,
    pub deeponet: DeepOnetConfig,
    /// Models trained by `compare`.
    pub models: Vec<ModelChoice>,
    /// Synthetic samples drawn from the latent density; 0 skips generation.
    pub kde_samples: usize,
    /// Input sensor counts (per axis) visited by `sweep`.
    pub sweep_sensors: Vec<usize>,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Desk-scale defaults for `problem`.
    pub fn preset(problem: Problem) -> Self {
        let base = Self {
            name: problem.to_string(),
            problem,
            kernel: KernelConfig::default(),
            kl: KlConfig::default(),
            input_grid: vec![],
            output_grid: vec![],
            refine: 4,
            n_train: 1000,
            n_test: 1000,
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            pce: PceConfig::default(),
            deeponet: DeepOnetConfig::default(),
            models: vec![ModelChoice::MultiAuto, ModelChoice::Pca],
            kde_samples: 0,
            sweep_sensors: vec![],
            seed: 0,
            out: None,
        };
        match problem {
            Problem::GrowthOde => Self {
                kernel: KernelConfig {
                    length_max: Some(2.0),
                    ..KernelConfig::default()
                },
                input_grid: vec![Axis::new(0.0, 1.0, 25)],
                output_grid: vec![Axis::new(0.0, 1.0, 25)],
                train: TrainConfig {
                    batch_size: 32,
                    ..TrainConfig::default()
                },
                models: vec![ModelChoice::MultiAuto, ModelChoice::Pca, ModelChoice::DeepOnet],
                kde_samples: 3000,
                sweep_sensors: vec![10, 15, 20, 25],
                ..base
            },
            Problem::Poisson1dInverse => Self {
                kernel: KernelConfig {
                    length: 1.5,
                    ..KernelConfig::default()
                },
                input_grid: vec![Axis::new(-1.0, 1.0, 40)],
                output_grid: vec![Axis::new(-1.0, 1.0, 40)],
                sweep_sensors: vec![10, 20, 30, 40],
                ..base
            },
            Problem::Poisson2dForward => Self {
                kernel: KernelConfig {
                    sigma: 0.5,
                    length: 1.5,
                    ..KernelConfig::default()
                },
                input_grid: vec![Axis::new(-1.0, 1.0, 20); 2],
                output_grid: vec![Axis::new(-1.0, 1.0, 20); 2],
                n_train: 2000,
                n_test: 1800,
                arch: ArchConfig {
                    latent: 15,
                    p: 20,
                    ..ArchConfig::default()
                },
                train: TrainConfig {
                    batch_size: 256,
                    ..TrainConfig::default()
                },
                models: vec![ModelChoice::MultiAuto, ModelChoice::Pca, ModelChoice::Pce],
                sweep_sensors: vec![9, 15, 19, 25],
                ..base
            },
            Problem::KdvForward => Self {
                kernel: KernelConfig {
                    family: KernelFamily::Exponential,
                    sigma: 1.0,
                    length: 0.25,
                    length_max: None,
                },
                input_grid: vec![Axis::new(0.0, 0.1, 10)],
                output_grid: vec![Axis::new(0.0, 4.0, 40), Axis::new(0.0, 0.1, 10)],
                refine: 20,
                n_train: 4000,
                n_test: 2000,
                arch: ArchConfig {
                    latent: 4,
                    ..ArchConfig::default()
                },
                train: TrainConfig {
                    batch_size: 256,
                    ..TrainConfig::default()
                },
                ..base
            },
        }
    }

    /// Parses a JSON config. Fields left out take the preset of the named
    /// problem; a run manifest is accepted too and yields its config echo.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut value: serde_json::Value = serde_json::from_str(text)?;
        if value.get("config").is_some() && value.get("files").is_some() {
            value = value["config"].take();
        }
        let problem: Problem = serde_json::from_value(
            value
                .get("problem")
                .cloned()
                .ok_or_else(|| Error::invalid("config lacks a \"problem\" field"))?,
        )?;
        let mut merged = serde_json::to_value(Self::preset(problem))?;
        merge(&mut merged, value);
        let config: Self = serde_json::from_value(merged)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Format {
                path: path.to_path_buf(),
                reason: j.to_string(),
            },
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn input_sensors(&self) -> Result<SensorGrid> {
        grid_of(&self.input_grid)
    }

    pub fn output_sensors(&self) -> Result<SensorGrid> {
        grid_of(&self.output_grid)
    }

    /// The same experiment with `n` sensors on every input axis. The
    /// Poisson problems keep output and input sensors identical.
    pub fn with_input_sensors(&self, n: usize) -> Self {
        let mut c = self.clone();
        c.input_grid.iter_mut().for_each(|a| a.n = n);
        if matches!(c.problem, Problem::Poisson1dInverse | Problem::Poisson2dForward) {
            c.output_grid = c.input_grid.clone();
        }
        c.name = format!("{}-n{n}", self.name);
        c
    }

    /// Checks counts and grid consistency for the problem.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.name.is_empty() || self.name.contains([',', '/', '\\']) {
            return bad(format!("experiment name {:?} must be non-empty without , / or \\", self.name));
        }
        if self.n_train == 0 || self.n_test < 2 || self.refine == 0 {
            return bad("n_train, refine must be positive and n_test at least 2".into());
        }
        for a in self.input_grid.iter().chain(&self.output_grid) {
            if a.n < 2 || !(a.lo < a.hi) || !a.lo.is_finite() || !a.hi.is_finite() {
                return bad(format!("axis {a:?} needs n ≥ 2 and lo < hi"));
            }
        }
        if self.sweep_sensors.contains(&0) || self.sweep_sensors.contains(&1) {
            return bad("sweep sensor counts must be at least 2".into());
        }
        let dims = (self.input_grid.len(), self.output_grid.len());
        let expect = match self.problem {
            Problem::GrowthOde | Problem::Poisson1dInverse => (1, 1),
            Problem::Poisson2dForward => (2, 2),
            Problem::KdvForward => (1, 2),
        };
        if dims != expect {
            return bad(format!("{} needs {expect:?} input/output axes, got {dims:?}", self.problem));
        }
        let kernel = self.kernel.spec(self.kernel.length)?;
        kernel.validate()?;
        if let Some(m) = self.kernel.length_max {
            if !(m >= self.kernel.length) {
                return bad(format!("length_max {m} below length {}", self.kernel.length));
            }
        }
        match self.problem {
            Problem::GrowthOde => {
                let (i, o) = (self.input_grid[0], self.output_grid[0]);
                if i.lo < 0.0 || o.lo < 0.0 {
                    return bad("growth sensors must lie in t ≥ 0".into());
                }
            }
            Problem::Poisson1dInverse | Problem::Poisson2dForward => {
                if self.input_grid != self.output_grid {
                    return bad("Poisson input and output sensors must coincide".into());
                }
            }
            Problem::KdvForward => {
                let t = self.input_grid[0];
                let q = self.output_grid[1];
                if t.lo != 0.0 {
                    return bad("KdV forcing sensors must start at t = 0".into());
                }
                if q.lo < 0.0 || q.hi > t.hi {
                    return bad(format!("KdV output times [{}, {}] outside [0, {}]", q.lo, q.hi, t.hi));
                }
                if self.kl.modes == 0 || !(self.kl.sigma > 0.0) {
                    return bad("KL forcing needs modes ≥ 1 and sigma > 0".into());
                }
            }
        }
        let n_in: usize = self.input_grid.iter().map(|a| a.n).product();
        if self.arch.latent == 0 || self.arch.p == 0 || self.arch.latent > n_in {
            return bad(format!("latent width {} must lie in 1..={n_in}", self.arch.latent));
        }
        self.train.validate()?;
        Ok(())
    }
}

/// Recursive object merge; `patch` wins.
fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for p in [Problem::GrowthOde, Problem::Poisson1dInverse, Problem::Poisson2dForward, Problem::KdvForward] {
            let c = ExperimentConfig::preset(p);
            c.validate().unwrap();
            let back = ExperimentConfig::from_json(&c.to_json()).unwrap();
            assert_eq!(back, c);
        }
        let c = ExperimentConfig::preset(Problem::Poisson2dForward);
        assert_eq!(c.input_sensors().unwrap().len(), 400);
        assert_eq!(c.n_train, 2000);
    }

    #[test]
    fn partial_config_fills_from_preset() {
        let c = ExperimentConfig::from_json(r#"{"problem": "growth-ode", "n_train": 50, "train": {"epochs": 3}}"#).unwrap();
        assert_eq!(c.n_train, 50);
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.batch_size, 32);
        assert_eq!(c.input_grid, vec![Axis::new(0.0, 1.0, 25)]);
        assert_eq!(c.kernel.length_max, Some(2.0));
    }

    #[test]
    fn manifest_yields_config() {
        let c = ExperimentConfig::preset(Problem::KdvForward);
        let manifest = serde_json::json!({"config": c, "files": {}, "seed": 0});
        assert_eq!(ExperimentConfig::from_json(&manifest.to_string()).unwrap(), c);
    }

    #[test]
    fn inconsistent_grids_rejected() {
        let mut c = ExperimentConfig::preset(Problem::Poisson1dInverse);
        c.output_grid[0].n = 30;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::preset(Problem::KdvForward);
        c.output_grid[1].hi = 0.2;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::preset(Problem::GrowthOde);
        c.output_grid.push(Axis::new(0.0, 1.0, 3));
        assert!(c.validate().is_err());
        assert!(ExperimentConfig::from_json(r#"{"problem": "growth-ode", "n_trian": 5}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"n_train": 5}"#).is_err());
    }

    #[test]
    fn sweep_variants() {
        let c = ExperimentConfig::preset(Problem::Poisson2dForward).with_input_sensors(15);
        assert_eq!(c.input_grid, c.output_grid);
        assert_eq!(c.input_sensors().unwrap().len(), 225);
        assert_eq!(c.name, "poisson2d-forward-n15");
        let g = ExperimentConfig::preset(Problem::GrowthOde).with_input_sensors(10);
        assert_eq!((g.input_grid[0].n, g.output_grid[0].n), (10, 25));
    }

    #[test]
    fn names_parse() {
        assert_eq!("pce".parse::<ModelChoice>().unwrap(), ModelChoice::Pce);
        assert_eq!("multiauto".parse::<ModelChoice>().unwrap(), ModelChoice::MultiAuto);
        assert!("auto".parse::<ModelChoice>().is_err());
        assert_eq!("kdv-forward".parse::<Problem>().unwrap(), Problem::KdvForward);
        assert_eq!(serde_json::to_string(&ModelChoice::DeepOnet).unwrap(), "\"deeponet\"");
    }
}
