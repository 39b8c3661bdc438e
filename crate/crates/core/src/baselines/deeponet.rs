use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::checkpoint::{load_into, read_checkpoint, write_checkpoint};
use crate::model::{fit, Affine, LossParts, TrainConfig, TrainReport, Trainable};
use crate::nn::{Activation, Bound, Mlp, ParamStore};
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeepOnetSpec {
    pub branch_inputs: usize,
    pub trunk_inputs: usize,
    pub p: usize,
    pub branch_hidden: Vec<usize>,
    pub trunk_hidden: Vec<usize>,
    pub output_norm: Affine,
    pub seed: u64,
}

/// Unstacked DeepONet: `G(u)(y) = branch(u) · trunk(y)`.
#[derive(Clone, Debug)]
pub struct DeepOnet {
    spec: DeepOnetSpec,
    store: ParamStore,
    branch: Mlp,
    trunk: Mlp,
}

/// Training data: per-sample branch features `[n, mb]`, per-query trunk
/// features `[n·S, dt]` grouped by sample, and targets `[n, S]` in physical
/// units.
#[derive(Clone, Debug, PartialEq)]
pub struct DeepOnetData {
    pub branch: Tensor,
    pub trunk: Tensor,
    pub targets: Tensor,
}

impl DeepOnetData {
    pub fn n_samples(&self) -> usize {
        self.branch.shape()[0]
    }

    pub fn queries_per_sample(&self) -> usize {
        self.targets.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_samples();
        let s = self.queries_per_sample();
        if self.targets.shape()[0] != n || self.trunk.shape()[0] != n * s {
            return Err(Error::ShapeMismatch {
                op: "deeponet data",
                lhs: vec![n, s],
                rhs: self.trunk.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn rows(&self, rows: &[usize]) -> (Tensor, Tensor, Tensor) {
        let s = self.queries_per_sample();
        let dt = self.trunk.shape()[1];
        let pick = |t: &Tensor| {
            let data = rows.iter().flat_map(|&r| t.row(r).iter().copied()).collect();
            Tensor::new([rows.len(), t.shape()[1]], data).expect("non-empty rows")
        };
        let trunk = rows
            .iter()
            .flat_map(|&r| self.trunk.data()[r * s * dt..(r + 1) * s * dt].iter().copied())
            .collect();
        (
            pick(&self.branch),
            Tensor::new([rows.len() * s, dt], trunk).expect("non-empty rows"),
            pick(&self.targets),
        )
    }
}

impl DeepOnet {
    pub fn new(spec: DeepOnetSpec) -> Result<Self> {
        if spec.branch_inputs == 0 || spec.trunk_inputs == 0 || spec.p == 0 {
            return Err(Error::invalid("DeepONet widths must be positive"));
        }
        let mut store = ParamStore::new();
        let widths = |input: usize, hidden: &[usize]| -> Vec<usize> {
            std::iter::once(input).chain(hidden.iter().copied()).chain(std::iter::once(spec.p)).collect()
        };
        let branch = Mlp::new(
            &mut store,
            "branch",
            &widths(spec.branch_inputs, &spec.branch_hidden),
            Activation::Tanh,
            Activation::Identity,
            rng::derive_seed(spec.seed, "branch", 0),
        )?;
        let trunk = Mlp::new(
            &mut store,
            "trunk",
            &widths(spec.trunk_inputs, &spec.trunk_hidden),
            Activation::Tanh,
            Activation::Identity,
            rng::derive_seed(spec.seed, "trunk", 0),
        )?;
        Ok(Self {
            spec,
            store,
            branch,
            trunk,
        })
    }

    pub fn spec(&self) -> &DeepOnetSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// `[B, S]` normalized outputs for branch `[B, mb]` and trunk `[B·S, dt]`.
    pub fn forward<'t>(&self, tape: &'t Tape, p: &Bound<'t>, branch: &Tensor, trunk: &Tensor) -> Result<Var<'t>> {
        let b = self.branch.forward(p, tape.constant(branch.clone()))?;
        let t = self.trunk.forward(p, tape.constant(trunk.clone()))?;
        b.batched_dot(t)
    }

    /// Mean squared error in normalized units on `rows`.
    pub fn loss<'t>(&self, tape: &'t Tape, p: &Bound<'t>, data: &DeepOnetData, rows: &[usize]) -> Result<LossParts<'t>> {
        let (branch, trunk, targets) = data.rows(rows);
        let norm = self.spec.output_norm;
        let out = self.forward(tape, p, &branch, &trunk)?;
        let mse = out.sub(tape.constant(targets.map(|v| norm.forward(v))))?.square().mean();
        let value = mse.value().item().expect("scalar");
        if !value.is_finite() {
            return Err(Error::NonFinite("loss term mse_u".into()));
        }
        Ok(LossParts {
            total: mse,
            mse_k: 0.0,
            mse_u: value,
            penalty: 0.0,
        })
    }

    pub fn train(&mut self, data: &DeepOnetData, cfg: &TrainConfig) -> Result<TrainReport> {
        data.validate()?;
        fit(self, data.n_samples(), cfg, |m, tape, p, rows| m.loss(tape, p, data, rows))
    }

    /// Predictions `[n, S]` in physical units.
    pub fn predict(&self, data: &DeepOnetData) -> Result<Tensor> {
        data.validate()?;
        let tape = Tape::new();
        let p = self.store.bind(&tape);
        let norm = self.spec.output_norm;
        Ok(self.forward(&tape, &p, &data.branch, &data.trunk)?.value().map(|v| norm.inverse(v)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, "deeponet", &self.spec, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = read_checkpoint::<DeepOnetSpec>(path, "deeponet")?;
        let mut m = Self::new(ck.spec)?;
        load_into(&mut m.store, ck.tensors, path)?;
        Ok(m)
    }
}

impl Trainable for DeepOnet {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

/// Single evaluation `branch(u) · trunk(y)` in normalized units.
pub fn deeponet_forward(net: &DeepOnet, branch_input: &[f64], trunk_input: &[f64]) -> Result<f64> {
    let tape = Tape::new();
    let p = net.store.bind(&tape);
    let b = Tensor::new([1, branch_input.len()], branch_input.to_vec())?;
    let t = Tensor::new([1, trunk_input.len()], trunk_input.to_vec())?;
    Ok(net.forward(&tape, &p, &b, &t)?.value().item().expect("scalar"))
}
