use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::net::{LossParts, MultiAutoModel, Penalty, Sensors};
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, AdamState, Bound, ParamStore};
use crate::rng;
use crate::stoch::FunctionEnsemble;
use crate::tensor::Tape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Upper bound on epochs; early stopping may end sooner.
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate reached at the last epoch by geometric decay. Equal to
    /// `learning_rate` for a constant rate.
    pub final_learning_rate: f64,
    pub l1_weight: f64,
    pub l1_on_branch: bool,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2000,
            batch_size: 100,
            learning_rate: 1e-3,
            final_learning_rate: 1e-5,
            l1_weight: 1e-3,
            l1_on_branch: true,
            patience: 200,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn penalty(&self) -> Penalty {
        Penalty {
            weight: self.l1_weight,
            on_branch: self.l1_on_branch,
        }
    }

    fn learning_rate_at(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 || self.final_learning_rate == self.learning_rate {
            return self.learning_rate;
        }
        let frac = epoch as f64 / (self.epochs - 1) as f64;
        self.learning_rate * (self.final_learning_rate / self.learning_rate).powf(frac)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.final_learning_rate > 0.0) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if !(self.l1_weight >= 0.0) {
            return Err(Error::invalid("L1 weight must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::invalid("validation fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Per-epoch losses.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train: Vec<f64>,
    pub val: Vec<f64>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.train.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train.is_empty()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for (i, (t, v)) in self.train.iter().zip(&self.val).enumerate() {
            out.push_str(&format!("{},{t:e},{v:e}\n", i + 1));
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let mut h = Self::default();
        for (i, line) in text.lines().enumerate().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 3 {
                return Err(bad(format!("line {}: expected 3 columns", i + 1)));
            }
            let parse = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("line {}: {e}", i + 1)));
            h.train.push(parse(cols[1])?);
            h.val.push(parse(cols[2])?);
        }
        Ok(h)
    }
}

/// Outcome of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub history: TrainHistory,
    /// 1-based epoch whose parameters were kept; 0 when no epoch ran.
    pub best_epoch: usize,
    /// Monitored loss at `best_epoch`.
    pub best_loss: f64,
    pub train_rows: Vec<usize>,
    pub val_rows: Vec<usize>,
}

/// Anything with a parameter store the optimizer can update.
pub trait Trainable {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
}

impl Trainable for MultiAutoModel {
    fn params(&self) -> &ParamStore {
        MultiAutoModel::params(self)
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        MultiAutoModel::params_mut(self)
    }
}

/// Seeded shuffle of `0..n` split into `(train, validation)`.
pub fn split_rows(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rows: Vec<usize> = (0..n).collect();
    rows.shuffle(&mut rng::stream(seed, "split", 0));
    let mut nval = (n as f64 * fraction).round() as usize;
    if fraction > 0.0 && n >= 2 {
        nval = nval.clamp(1, n - 1);
    }
    let train = rows.split_off(nval);
    (train, rows)
}

/// Mini-batch Adam over `n` samples with early stopping on the validation
/// loss. The best parameters seen are restored at the end.
///
/// `loss` evaluates the objective on the given sample rows.
pub fn fit<M: Trainable>(
    model: &mut M,
    n: usize,
    cfg: &TrainConfig,
    loss: impl for<'t> Fn(&M, &'t Tape, &Bound<'t>, &[usize]) -> Result<LossParts<'t>>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let (mut train_rows, val_rows) = split_rows(n, cfg.validation_fraction, cfg.seed);
    if train_rows.is_empty() {
        return Err(Error::invalid("no training samples"));
    }
    if cfg.batch_size > train_rows.len() {
        return Err(Error::invalid(format!(
            "batch size {} exceeds the {} training samples",
            cfg.batch_size,
            train_rows.len()
        )));
    }
    let evaluate = |m: &M, rows: &[usize]| -> Result<f64> {
        let tape = Tape::new();
        let p = m.params().bind(&tape);
        let parts = loss(m, &tape, &p, rows)?;
        Ok(parts.total.value().item().expect("scalar"))
    };

    let mut adam = AdamState::new(
        model.params(),
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut history = TrainHistory::default();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let diverged = |epoch: usize, e: Error| Error::Diverged {
        epoch,
        detail: e.to_string(),
    };

    for epoch in 1..=cfg.epochs {
        adam.config.learning_rate = cfg.learning_rate_at(epoch - 1);
        train_rows.shuffle(&mut rng::stream(cfg.seed, "epoch", epoch as u64));
        let mut acc = 0.0;
        for chunk in train_rows.chunks(cfg.batch_size) {
            let tape = Tape::new();
            let p = model.params().bind(&tape);
            let parts = loss(model, &tape, &p, chunk).map_err(|e| diverged(epoch, e))?;
            acc += parts.total.value().item().expect("scalar") * chunk.len() as f64;
            let grads = parts.total.backward()?;
            adam.step(model.params_mut(), &grads).map_err(|e| diverged(epoch, e))?;
        }
        let train_loss = acc / train_rows.len() as f64;
        let val_loss = if val_rows.is_empty() {
            train_loss
        } else {
            evaluate(model, &val_rows).map_err(|e| diverged(epoch, e))?
        };
        history.train.push(train_loss);
        history.val.push(val_loss);

        let improved = best.as_ref().is_none_or(|(_, b, _)| val_loss < *b);
        if improved {
            best = Some((epoch, val_loss, model.params().clone()));
        }
        let since = epoch - best.as_ref().map_or(0, |b| b.0);
        if cfg.patience > 0 && since >= cfg.patience {
            log::info!("early stop at epoch {epoch}, best {}", best.as_ref().unwrap().0);
            break;
        }
        if epoch % 100 == 0 {
            log::debug!("epoch {epoch}: train {train_loss:.3e} val {val_loss:.3e}");
        }
    }

    let (best_epoch, best_loss) = match best {
        Some((e, l, store)) => {
            *model.params_mut() = store;
            (e, l)
        }
        None => (0, f64::NAN),
    };
    Ok(TrainReport {
        history,
        best_epoch,
        best_loss,
        train_rows,
        val_rows,
    })
}

/// Trains a two-head model on raw `inputs → targets`.
pub fn train(
    model: &mut MultiAutoModel,
    inputs: &FunctionEnsemble,
    targets: &FunctionEnsemble,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if inputs.n_samples() != targets.n_samples() {
        return Err(Error::invalid("inputs and targets differ in sample count"));
    }
    let sensors = Sensors::of(inputs, targets);
    let all: Vec<usize> = (0..inputs.n_samples()).collect();
    let full = model.batch(inputs, targets, &all)?;
    let penalty = cfg.penalty();
    fit(model, inputs.n_samples(), cfg, |m, tape, p, rows| {
        let batch = super::net::Batch {
            inputs: gather(&full.inputs, rows),
            targets: gather(&full.targets, rows),
        };
        m.loss(tape, p, &batch, &sensors, penalty)
    })
}

/// Rows of a rank-2 tensor.
pub(crate) fn gather(t: &crate::tensor::Tensor, rows: &[usize]) -> crate::tensor::Tensor {
    let data = rows.iter().flat_map(|&r| t.row(r).iter().copied()).collect();
    crate::tensor::Tensor::new([rows.len(), t.shape()[1]], data).expect("non-empty rows")
}

/// Loss of `model` on `rows` of a dataset, without the optimizer.
pub fn evaluate_loss(
    model: &MultiAutoModel,
    inputs: &FunctionEnsemble,
    targets: &FunctionEnsemble,
    rows: &[usize],
    penalty: Penalty,
) -> Result<(f64, f64, f64, f64)> {
    let batch = model.batch(inputs, targets, rows)?;
    let sensors = Sensors::of(inputs, targets);
    let tape = Tape::new();
    let p = model.params().bind(&tape);
    let parts = model.loss(&tape, &p, &batch, &sensors, penalty)?;
    Ok((
        parts.total.value().item().expect("scalar"),
        parts.mse_k,
        parts.mse_u,
        parts.penalty,
    ))
}
