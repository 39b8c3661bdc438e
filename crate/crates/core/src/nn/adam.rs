use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for every parameter of one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = |s: &ParamStore| -> Vec<Tensor> {
            s.iter().map(|(_, _, t)| Tensor::zeros(t.shape().to_vec())).collect()
        };
        Self {
            config,
            step: 0,
            first: zeros(store),
            second: zeros(store),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. Nothing is modified if any gradient is
    /// non-finite or has the wrong shape.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if store.len() != self.first.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first.len(),
                store.len()
            )));
        }
        for id in store.ids() {
            let Some(g) = grads.get(id) else { continue };
            if g.shape() != store.get(id).shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    lhs: store.get(id).shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", store.name(id))));
            }
        }

        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for id in store.ids() {
            let Some(g) = grads.get(id) else { continue };
            let m = self.first[id.0].data_mut();
            let v = self.second[id.0].data_mut();
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamId, Tape};

    fn grads_for(store: &ParamStore, values: &[f64]) -> Gradients {
        // loss = Σ g_i p_i has gradient g
        let tape = Tape::new();
        let p = store.bind(&tape);
        let g = tape.constant(Tensor::vector(values.to_vec()));
        p[ParamId(0)].mul(g).unwrap().sum().backward().unwrap()
    }

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::vector(vec![v]));
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = scalar_store(0.5);
        let mut adam = AdamState::new(&store, AdamConfig::default());
        { let g = grads_for(&store, &[0.0]); adam.step(&mut store, &g) }.unwrap();
        assert_eq!(store.get(ParamId(0)).data(), &[0.5]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // t = 1: m̂ = g, v̂ = g², update = lr·g/(|g| + ε)
        let mut store = scalar_store(0.0);
        let mut adam = AdamState::new(&store, AdamConfig::default());
        { let g = grads_for(&store, &[1.0]); adam.step(&mut store, &g) }.unwrap();
        let p = store.get(ParamId(0)).data()[0];
        let expect = -1e-3 * 1.0 / (1.0 + 1e-8);
        assert!((p - expect).abs() < 1e-15, "{p}");
    }

    #[test]
    fn identical_states_give_identical_updates() {
        let run = || {
            let mut store = scalar_store(0.3);
            let mut adam = AdamState::new(&store, AdamConfig::default());
            for g in [0.1, -2.0, 0.7] {
                let grads = grads_for(&store, &[g]);
                adam.step(&mut store, &grads).unwrap();
            }
            store.get(ParamId(0)).data()[0]
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn constant_gradient_update_tends_to_learning_rate() {
        let mut store = scalar_store(0.0);
        let mut adam = AdamState::new(&store, AdamConfig::default());
        let mut last = 0.0;
        for _ in 0..5000 {
            let before = store.get(ParamId(0)).data()[0];
            { let g = grads_for(&store, &[-0.25]); adam.step(&mut store, &g) }.unwrap();
            last = store.get(ParamId(0)).data()[0] - before;
        }
        assert!((last.abs() - 1e-3).abs() < 1e-6, "{last}");
    }

    #[test]
    fn non_finite_gradient_is_rejected_by_name() {
        let mut store = scalar_store(1.0);
        let mut adam = AdamState::new(&store, AdamConfig::default());
        let g = grads_for(&store, &[f64::NAN]);
        let err = adam.step(&mut store, &g).unwrap_err();
        assert!(err.to_string().contains('p'), "{err}");
        assert_eq!(adam.steps(), 0);
        assert_eq!(store.get(ParamId(0)).data(), &[1.0]);
    }
}
