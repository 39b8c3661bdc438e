//! Layers, parameter storage, Glorot initialization, the output L1 penalty
//! and the Adam optimizer.

mod adam;
mod layers;
mod params;

pub use adam::{AdamConfig, AdamState};
pub use layers::{init_params, Activation, ConvLayer, DenseLayer, LayerParams, LayerSpec, Mlp};
pub use params::{Bound, ParamStore};

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Sum of absolute values over every entry of every input.
///
/// The backward rule is the sign function with subgradient 0 at 0.
pub fn l1_penalty<'t>(tape: &'t Tape, vectors: &[Var<'t>]) -> Result<Var<'t>> {
    let mut total = tape.constant(Tensor::scalar(0.0));
    for v in vectors {
        total = total.add(v.abs().sum())?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamId;
    use proptest::prelude::*;

    fn l1_value(values: &[Vec<f64>]) -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = values
            .iter()
            .map(|v| tape.constant(Tensor::vector(v.clone())))
            .collect();
        l1_penalty(&tape, &vars).unwrap().value().item().unwrap()
    }

    #[test]
    fn l1_examples() {
        assert_eq!(l1_value(&[vec![1.0, -2.0], vec![3.0]]), 6.0);
        assert_eq!(l1_value(&[vec![0.0; 4]]), 0.0);

        let tape = Tape::new();
        let p = tape.param(ParamId(0), Tensor::vector(vec![2.0, -3.0, 0.0]));
        let g = l1_penalty(&tape, &[p]).unwrap().backward().unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap().data(), &[1.0, -1.0, 0.0]);
    }

    proptest! {
        #[test]
        fn l1_is_positively_homogeneous(v in prop::collection::vec(-10.0f64..10.0, 1..20), c in -5.0f64..5.0) {
            let scaled: Vec<f64> = v.iter().map(|x| c * x).collect();
            let lhs = l1_value(&[scaled]);
            let rhs = c.abs() * l1_value(&[v]);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs));
        }
    }
}
