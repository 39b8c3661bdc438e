use std::path::Path;

use super::config::{ExperimentConfig, ModelChoice, Problem};
use super::data::{Dataset, Splits};
use crate::baselines::{DeepOnet, DeepOnetData, DeepOnetSpec};
use crate::error::{Error, Result};
use crate::model::{train, Affine, Head, ModelKind, ModelSpec, MultiAutoModel, TrainReport};
use crate::rng;
use crate::stoch::{kl_modes, FunctionEnsemble, SensorGrid};
use crate::tensor::Tensor;
use crate::uq::{avg_rel_l2, ensemble_stats, generate_ensemble, kde_fit, mse, rel_l2, MetricRow};

/// Entries with magnitude below this count as zero in sparsity figures.
pub const SPARSITY_THRESHOLD: f64 = 1e-3;

/// A trained model of any kind.
#[derive(Clone, Debug)]
pub enum Trained {
    TwoHead(MultiAutoModel),
    DeepOnet(DeepOnet),
}

impl Trained {
    pub fn save(&self, path: &Path) -> Result<()> {
        match self {
            Trained::TwoHead(m) => m.save(path),
            Trained::DeepOnet(m) => m.save(path),
        }
    }

    pub fn load(path: &Path, choice: ModelChoice) -> Result<Self> {
        Ok(match choice {
            ModelChoice::DeepOnet => Trained::DeepOnet(DeepOnet::load(path)?),
            _ => Trained::TwoHead(MultiAutoModel::load(path)?),
        })
    }

    /// Predicted targets for every sample of `inputs` on `grid`.
    pub fn predict(&self, config: &ExperimentConfig, inputs: &FunctionEnsemble, grid: &SensorGrid) -> Result<FunctionEnsemble> {
        match self {
            Trained::TwoHead(m) => m.predict_ensemble(inputs, grid),
            Trained::DeepOnet(m) => {
                let data = deeponet_features(config, inputs, None, grid)?;
                FunctionEnsemble::new(grid.clone(), m.predict(&data)?.into_data())
            }
        }
    }
}

fn model_kind(choice: ModelChoice) -> Option<ModelKind> {
    match choice {
        ModelChoice::MultiAuto => Some(ModelKind::MultiAuto),
        ModelChoice::Pca => Some(ModelKind::Pca),
        ModelChoice::Pce => Some(ModelKind::Pce),
        ModelChoice::DeepOnet => None,
    }
}

/// Karhunen–Loève features of the vanilla DeepONet. Each trajectory's
/// branch input stacks `sqrt(λ_i) e_i` at the sensors for its own kernel,
/// and each trunk query is `[t, ξ_1, …, ξ_N]` with the trajectory's KL
/// coordinates. Needs the per-trajectory correlation lengths stored with the
/// growth inputs.
pub fn deeponet_features(
    config: &ExperimentConfig,
    inputs: &FunctionEnsemble,
    targets: Option<&FunctionEnsemble>,
    grid: &SensorGrid,
) -> Result<DeepOnetData> {
    if config.problem != Problem::GrowthOde || inputs.latent_width() != 1 {
        return Err(Error::invalid(format!(
            "the DeepONet baseline needs per-trajectory kernels, available for growth-ode only (got {})",
            config.problem
        )));
    }
    let n = inputs.n_samples();
    let modes = config.deeponet.modes;
    let (m, s) = (inputs.n_sensors(), grid.len());
    let zero = vec![0.0; m];
    let times: Vec<f64> = grid.points().into_iter().map(|p| p[0]).collect();
    let mut branch = Vec::with_capacity(n * modes * m);
    let mut trunk = Vec::with_capacity(n * s * (modes + 1));
    for i in 0..n {
        let length = inputs.latent(i).expect("latent width checked")[0];
        let basis = kl_modes(&config.kernel.spec(length)?, inputs.grid(), modes)?;
        for (lam, e) in basis.eigenvalues.iter().zip(&basis.eigenfunctions) {
            branch.extend(e.iter().map(|v| lam.sqrt() * v));
        }
        let xi = basis.project(inputs.sample(i), &zero);
        for &t in &times {
            trunk.push(t);
            trunk.extend_from_slice(&xi);
        }
    }
    let targets = match targets {
        Some(t) => t.to_tensor()?,
        None => Tensor::zeros([n, s]),
    };
    let data = DeepOnetData {
        branch: Tensor::new([n, modes * m], branch)?,
        trunk: Tensor::new([n * s, modes + 1], trunk)?,
        targets,
    };
    data.validate()?;
    Ok(data)
}

/// Builds and trains `choice` on the training split.
pub fn train_model(config: &ExperimentConfig, train_set: &Dataset, choice: ModelChoice) -> Result<(Trained, TrainReport)> {
    let mut cfg = config.train.clone();
    cfg.seed = config.seed;
    let init = rng::derive_seed(config.seed, "init", choice as u64);
    let (inputs, targets) = (&train_set.inputs, &train_set.targets);
    match model_kind(choice) {
        Some(kind) => {
            let spec = ModelSpec::fit(kind, &config.arch, inputs, targets, (config.pce.dim, config.pce.order), init)?;
            let mut model = MultiAutoModel::new(spec)?;
            let report = train(&mut model, inputs, targets, &cfg)?;
            Ok((Trained::TwoHead(model), report))
        }
        None => {
            let data = deeponet_features(config, inputs, Some(targets), targets.grid())?;
            let d = &config.deeponet;
            let mut model = DeepOnet::new(DeepOnetSpec {
                branch_inputs: data.branch.shape()[1],
                trunk_inputs: data.trunk.shape()[1],
                p: d.p,
                branch_hidden: d.branch_hidden.clone(),
                trunk_hidden: d.trunk_hidden.clone(),
                output_norm: Affine::fit(targets.values()),
                seed: init,
            })?;
            let report = model.train(&data, &cfg)?;
            Ok((Trained::DeepOnet(model), report))
        }
    }
}

/// Per-sensor statistics of the reference and of a model, for overlays.
#[derive(Clone, Debug, PartialEq)]
pub struct StatsTable {
    pub grid: SensorGrid,
    pub ref_mean: Vec<f64>,
    pub ref_var: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl StatsTable {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        use std::fmt::Write as _;
        let dim = self.grid.dim();
        let mut out = String::from("index");
        for name in ["x", "y"].iter().take(dim) {
            write!(out, ",{name}").unwrap();
        }
        out.push_str(",ref_mean,pred_mean,ref_var,pred_var\n");
        for (i, p) in self.grid.points().into_iter().enumerate() {
            write!(out, "{i}").unwrap();
            for c in p {
                write!(out, ",{c:e}").unwrap();
            }
            writeln!(
                out,
                ",{:e},{:e},{:e},{:e}",
                self.ref_mean[i], self.mean[i], self.ref_var[i], self.var[i]
            )
            .unwrap();
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Coefficients and basis of one sample: `a` over input sensors, `b` over
/// output sensors, `φ` of the sample's latent code.
#[derive(Clone, Debug, PartialEq)]
pub struct Coefficients {
    pub a: Tensor,
    pub b: Tensor,
    pub phi: Vec<f64>,
    pub input_grid: SensorGrid,
    pub output_grid: SensorGrid,
}

impl Coefficients {
    /// Rows `series,position,coordinate,component,value`; the coordinate is
    /// the first sensor coordinate, and for `phi` the component index.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        use std::fmt::Write as _;
        let mut out = String::from("series,position,coordinate,component,value\n");
        for (name, t, grid) in [("a", &self.a, &self.input_grid), ("b", &self.b, &self.output_grid)] {
            let p = t.shape()[1];
            for (s, pt) in grid.points().into_iter().enumerate() {
                for j in 0..p {
                    writeln!(out, "{name},{s},{:e},{j},{:e}", pt[0], t.at2(s, j)).unwrap();
                }
            }
        }
        for (j, v) in self.phi.iter().enumerate() {
            writeln!(out, "phi,0,{j},{j},{v:e}").unwrap();
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

fn zero_fraction(values: &[f64]) -> f64 {
    values.iter().filter(|v| v.abs() < SPARSITY_THRESHOLD).count() as f64 / values.len() as f64
}

/// Everything `evaluate` reports for one model.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub rows: Vec<MetricRow>,
    pub stats: StatsTable,
    pub coefficients: Option<Coefficients>,
    pub generated: Option<StatsTable>,
}

/// Test-set metrics: MSE and average relative l2 of the predicted targets,
/// relative l2 of the predicted mean and variance, plus reconstruction
/// error, sparsity fractions and latent-density sampling for two-head
/// models.
pub fn evaluate_model(
    config: &ExperimentConfig,
    trained: &Trained,
    report: Option<&TrainReport>,
    splits: &Splits,
    choice: ModelChoice,
) -> Result<Evaluation> {
    let id = format!("{}/{}", config.name, choice);
    let test = &splits.test;
    let grid = test.targets.grid();
    let pred = trained.predict(config, &test.inputs, grid)?;
    let truth = ensemble_stats(&test.targets)?;
    let ps = ensemble_stats(&pred)?;
    let mut rows = vec![
        MetricRow::new(&id, "test_mse", mse(pred.values(), test.targets.values())?),
        MetricRow::new(&id, "test_avg_rel_l2", avg_rel_l2(&pred, &test.targets)?),
        MetricRow::new(&id, "mean_rel_l2", rel_l2(&ps.mean, &truth.mean)?),
        MetricRow::new(&id, "var_rel_l2", rel_l2(&ps.variance, &truth.variance)?),
    ];
    if let Some(r) = report {
        rows.push(MetricRow::new(&id, "best_val_loss", r.best_loss));
        rows.push(MetricRow::new(&id, "best_epoch", r.best_epoch as f64));
        rows.push(MetricRow::new(&id, "epochs_run", r.history.len() as f64));
    }
    let stats = StatsTable {
        grid: grid.clone(),
        ref_mean: truth.mean.clone(),
        ref_var: truth.variance.clone(),
        mean: ps.mean,
        var: ps.variance,
    };
    let (mut coefficients, mut generated) = (None, None);
    if let Trained::TwoHead(model) = trained {
        let x = test.inputs.to_tensor()?;
        let (k, _) = model.predict_batch(&x, &crate::model::Sensors::of(&test.inputs, &test.targets))?;
        rows.push(MetricRow::new(&id, "recon_mse", mse(k.data(), test.inputs.values())?));
        let a = model.trunk(Head::Reconstruction, &test.inputs.grid().coordinates())?;
        let b = model.trunk(Head::Solution, &grid.coordinates())?;
        let phi = model.basis(&model.encode(&x)?)?;
        rows.push(MetricRow::new(&id, "sparsity_a", zero_fraction(a.data())));
        rows.push(MetricRow::new(&id, "sparsity_b", zero_fraction(b.data())));
        rows.push(MetricRow::new(&id, "sparsity_phi", zero_fraction(phi.data())));
        coefficients = Some(Coefficients {
            a,
            b,
            phi: phi.row(0).to_vec(),
            input_grid: test.inputs.grid().clone(),
            output_grid: grid.clone(),
        });
        if choice == ModelChoice::MultiAuto && config.kde_samples >= 2 {
            let z = model.encode(&splits.train.inputs.to_tensor()?)?;
            let kde = kde_fit(&z)?;
            let seed = rng::derive_seed(config.seed, "generate", 0);
            let (_, gu) = generate_ensemble(model, &kde, test.inputs.grid(), grid, config.kde_samples, seed)?;
            let gs = ensemble_stats(&gu)?;
            rows.push(MetricRow::new(&id, "gen_mean_rel_l2", rel_l2(&gs.mean, &truth.mean)?));
            rows.push(MetricRow::new(&id, "gen_var_rel_l2", rel_l2(&gs.variance, &truth.variance)?));
            generated = Some(StatsTable {
                grid: grid.clone(),
                ref_mean: truth.mean,
                ref_var: truth.variance,
                mean: gs.mean,
                var: gs.variance,
            });
        }
    }
    Ok(Evaluation {
        rows,
        stats,
        coefficients,
        generated,
    })
}
