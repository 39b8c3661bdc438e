use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::params::{Bound, ParamStore};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{ParamId, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply<'t>(self, x: Var<'t>) -> Var<'t> {
        match self {
            Activation::Relu => x.relu(),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }
}

/// Extents of a layer's trainable tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv1d {
        in_channels: usize,
        out_channels: usize,
        width: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        height: usize,
        width: usize,
    },
}

impl LayerSpec {
    fn weight_shape(&self) -> Vec<usize> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => vec![outputs, inputs],
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                width,
            } => vec![out_channels, in_channels, width],
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                height,
                width,
            } => vec![out_channels, in_channels, height, width],
        }
    }

    fn fans(&self) -> (usize, usize) {
        match *self {
            LayerSpec::Dense { inputs, outputs } => (inputs, outputs),
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                width,
            } => (in_channels * width, out_channels * width),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                height,
                width,
            } => (in_channels * height * width, out_channels * height * width),
        }
    }
}

/// Freshly initialized tensors for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weights: Tensor,
    /// Present for dense layers only.
    pub bias: Option<Tensor>,
}

/// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
pub fn init_params(spec: &LayerSpec, seed: u64) -> Result<LayerParams> {
    let shape = spec.weight_shape();
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::invalid(format!("layer extents must be positive: {spec:?}")));
    }
    let (fan_in, fan_out) = spec.fans();
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut r = rng::stream(seed, "glorot", 0);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| r.random_range(-limit..limit)).collect();
    let bias = match *spec {
        LayerSpec::Dense { outputs, .. } => Some(Tensor::zeros([outputs])),
        _ => None,
    };
    Ok(LayerParams {
        weights: Tensor::new(shape, data)?,
        bias,
    })
}

/// `y = act(x Wᵀ + b)` on a batch `x: [B, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub weights: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
    pub inputs: usize,
    pub outputs: usize,
}

impl DenseLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        let p = init_params(&LayerSpec::Dense { inputs, outputs }, seed)?;
        Ok(Self {
            weights: store.add(format!("{name}.weight"), p.weights),
            bias: store.add(format!("{name}.bias"), p.bias.expect("dense bias")),
            activation,
            inputs,
            outputs,
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul_t(p[self.weights])?.add_bias(p[self.bias])?;
        Ok(self.activation.apply(y))
    }
}

/// Valid convolution with a bias-free kernel. One- or two-dimensional
/// depending on the kernel rank.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub kernel: ParamId,
    pub stride: usize,
    pub activation: Activation,
    pub spec: LayerSpec,
}

impl ConvLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        spec: LayerSpec,
        stride: usize,
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::invalid("conv stride must be at least 1"));
        }
        if matches!(spec, LayerSpec::Dense { .. }) {
            return Err(Error::invalid("ConvLayer needs a convolutional spec"));
        }
        let p = init_params(&spec, seed)?;
        Ok(Self {
            kernel: store.add(format!("{name}.kernel"), p.weights),
            stride,
            activation,
            spec,
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let y = match self.spec {
            LayerSpec::Conv1d { .. } => x.conv1d(p[self.kernel], self.stride)?,
            LayerSpec::Conv2d { .. } => x.conv2d(p[self.kernel], self.stride)?,
            LayerSpec::Dense { .. } => unreachable!("rejected in new"),
        };
        Ok(self.activation.apply(y))
    }
}

/// A stack of dense layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

impl Mlp {
    /// `widths` lists every extent from input to output; hidden layers use
    /// `hidden`, the last layer uses `output`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        seed: u64,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::invalid(format!("{name}: need at least input and output width")));
        }
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { output } else { hidden };
                DenseLayer::new(
                    store,
                    &format!("{name}.{i}"),
                    widths[i],
                    widths[i + 1],
                    act,
                    rng::derive_seed(seed, name, i as u64),
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, mut x: Var<'t>) -> Result<Var<'t>> {
        for layer in &self.layers {
            x = layer.forward(p, x)?;
        }
        Ok(x)
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().expect("non-empty").outputs
    }

    pub fn last(&self) -> &DenseLayer {
        self.layers.last().expect("non-empty")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Tape};

    #[test]
    fn init_is_deterministic_per_seed() {
        let spec = LayerSpec::Dense {
            inputs: 7,
            outputs: 5,
        };
        assert_eq!(init_params(&spec, 3).unwrap(), init_params(&spec, 3).unwrap());
        assert_ne!(init_params(&spec, 3).unwrap(), init_params(&spec, 4).unwrap());
    }

    #[test]
    fn glorot_statistics_and_zero_bias() {
        let spec = LayerSpec::Dense {
            inputs: 100,
            outputs: 100,
        };
        let p = init_params(&spec, 0).unwrap();
        let w = p.weights.data();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        assert!(mean.abs() < 0.01, "{mean}");
        let limit = (6.0f64 / 200.0).sqrt();
        assert!(w.iter().all(|v| v.abs() <= limit));
        assert!(p.bias.unwrap().data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn distinct_seeds_rarely_collide() {
        let spec = LayerSpec::Conv1d {
            in_channels: 1,
            out_channels: 2,
            width: 3,
        };
        let draws: Vec<_> = (0..200).map(|s| init_params(&spec, s).unwrap().weights).collect();
        for i in 0..draws.len() {
            for j in i + 1..draws.len() {
                assert_ne!(draws[i], draws[j]);
            }
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let mut store = ParamStore::new();
        let spec = LayerSpec::Conv1d {
            in_channels: 1,
            out_channels: 1,
            width: 3,
        };
        assert!(ConvLayer::new(&mut store, "c", spec, 0, Activation::Relu, 0).is_err());
        assert!(init_params(&LayerSpec::Dense { inputs: 0, outputs: 3 }, 0).is_err());
    }

    /// grad_check over the tensors of `store`, seen by layer code as bound
    /// parameters.
    fn check_layers(store: &ParamStore, f: impl for<'t> Fn(&Bound<'t>, &'t Tape) -> Result<Var<'t>>) -> f64 {
        let params: Vec<Tensor> = store.iter().map(|(_, _, t)| t.clone()).collect();
        grad_check(|tape, vars| f(&Bound::from_vars(vars.to_vec()), tape), &params, 1e-5).unwrap()
    }

    #[test]
    fn every_layer_type_passes_grad_check() {
        let mut store = ParamStore::new();
        let conv1 = ConvLayer::new(
            &mut store,
            "c1",
            LayerSpec::Conv1d {
                in_channels: 1,
                out_channels: 2,
                width: 3,
            },
            1,
            Activation::Tanh,
            1,
        )
        .unwrap();
        let conv2 = ConvLayer::new(
            &mut store,
            "c2",
            LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: 2,
                height: 2,
                width: 2,
            },
            1,
            Activation::Tanh,
            2,
        )
        .unwrap();
        let mlp = Mlp::new(&mut store, "m", &[4, 3, 2], Activation::Tanh, Activation::Identity, 3).unwrap();

        let x1 = Tensor::new([2, 1, 6], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let x2 = Tensor::new([2, 1, 3, 3], (0..18).map(|i| (i as f64 * 0.61).cos()).collect()).unwrap();
        let x3 = Tensor::new([5, 4], (0..20).map(|i| (i as f64 * 0.23).sin()).collect()).unwrap();
        let err = check_layers(&store, |p, tape| {
            let a = conv1.forward(p, tape.constant(x1.clone()))?.square().sum();
            let b = conv2.forward(p, tape.constant(x2.clone()))?.square().sum();
            let c = mlp.forward(p, tape.constant(x3.clone()))?.square().sum();
            a.add(b)?.add(c)
        });
        assert!(err < 1e-5, "{err}");

        let relu_mlp = {
            let mut s = ParamStore::new();
            let m = Mlp::new(&mut s, "r", &[4, 6, 1], Activation::Relu, Activation::Identity, 9).unwrap();
            (s, m)
        };
        let err = check_layers(&relu_mlp.0, |p, tape| {
            Ok(relu_mlp.1.forward(p, tape.constant(x3.clone()))?.square().mean())
        });
        assert!(err < 1e-5, "{err}");
    }
}
