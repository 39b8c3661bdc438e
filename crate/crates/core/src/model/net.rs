use super::spec::{BasisSpec, EncoderSpec, FieldNorm, ModelSpec};
use crate::baselines::{gaussian_to_unit, PceBasis};
use crate::error::{Error, Result};
use crate::nn::{l1_penalty, Activation, Bound, ConvLayer, LayerSpec, Mlp, ParamStore};
use crate::rng;
use crate::stoch::{FunctionEnsemble, SensorGrid};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug)]
enum Encoder {
    Conv { convs: Vec<ConvLayer>, dense: Mlp },
    Pca,
}

#[derive(Clone, Debug)]
enum Basis {
    Branch(Mlp),
    Pce(PceBasis),
}

/// Convolutional autoencoder whose decoder is two DeepONets sharing one
/// branch net. The reconstruction head evaluates `a(x)·φ(z)` at input
/// sensors and the solution head `b(x′)·φ(z)` at output sensors.
///
/// The PCA and PCE baselines are the same model with the encoder (and for
/// PCE also the branch) replaced by frozen maps.
#[derive(Clone, Debug)]
pub struct MultiAutoModel {
    spec: ModelSpec,
    store: ParamStore,
    encoder: Encoder,
    basis: Basis,
    trunk_unsup: Mlp,
    trunk_sup: Mlp,
}

/// Which trunk net.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Reconstruction,
    Solution,
}

/// Query coordinates of both heads: `[S1, d1]` and `[S2, d2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sensors {
    pub unsup: Tensor,
    pub sup: Tensor,
}

impl Sensors {
    pub fn of(inputs: &FunctionEnsemble, targets: &FunctionEnsemble) -> Self {
        Self {
            unsup: inputs.grid().coordinates(),
            sup: targets.grid().coordinates(),
        }
    }
}

/// Normalized inputs `[B, m]` and solution targets `[B, S2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub targets: Tensor,
}

/// Every intermediate of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Heads<'t> {
    pub z: Var<'t>,
    pub phi: Var<'t>,
    pub a: Var<'t>,
    pub b: Var<'t>,
    /// `[B, S1]` reconstruction.
    pub k: Var<'t>,
    /// `[B, S2]` prediction.
    pub u: Var<'t>,
}

/// The combined loss and its three summands.
#[derive(Clone, Copy, Debug)]
pub struct LossParts<'t> {
    pub total: Var<'t>,
    pub mse_k: f64,
    pub mse_u: f64,
    /// Unweighted L1 penalty.
    pub penalty: f64,
}

/// L1 weight and whether the branch outputs are penalized along with the
/// trunk outputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Penalty {
    pub weight: f64,
    pub on_branch: bool,
}

impl Penalty {
    pub const NONE: Penalty = Penalty {
        weight: 0.0,
        on_branch: true,
    };
}

fn checked(v: f64, term: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("loss term {term}")))
    }
}

impl MultiAutoModel {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let a = &spec.arch;
        let mut store = ParamStore::new();
        let seed = |tag: &str| rng::derive_seed(spec.seed, tag, 0);

        let encoder = match &spec.encoder {
            EncoderSpec::Pca { .. } => Encoder::Pca,
            EncoderSpec::Conv => {
                let mut extents = spec.input_extents.clone();
                let mut channels = 1;
                let mut convs = Vec::new();
                for (i, &out) in a.conv_channels.iter().enumerate() {
                    if let Some(&e) = extents.iter().find(|&&e| e < a.conv_width) {
                        return Err(Error::KernelTooWide {
                            op: "encoder",
                            kernel: a.conv_width,
                            input: e,
                        });
                    }
                    let layer = if extents.len() == 1 {
                        LayerSpec::Conv1d {
                            in_channels: channels,
                            out_channels: out,
                            width: a.conv_width,
                        }
                    } else {
                        LayerSpec::Conv2d {
                            in_channels: channels,
                            out_channels: out,
                            height: a.conv_width,
                            width: a.conv_width,
                        }
                    };
                    let name = format!("encoder.conv{i}");
                    convs.push(ConvLayer::new(&mut store, &name, layer, 1, Activation::Relu, seed(&name))?);
                    extents.iter_mut().for_each(|e| *e = *e - a.conv_width + 1);
                    channels = out;
                }
                let flat = channels * extents.iter().product::<usize>();
                let widths: Vec<usize> = std::iter::once(flat)
                    .chain(a.encoder_hidden.iter().copied())
                    .chain(std::iter::once(a.latent))
                    .collect();
                let dense = Mlp::new(
                    &mut store,
                    "encoder.dense",
                    &widths,
                    Activation::Relu,
                    Activation::Identity,
                    seed("encoder.dense"),
                )?;
                Encoder::Conv { convs, dense }
            }
        };

        let stack = |input: usize, hidden: &[usize]| -> Vec<usize> {
            std::iter::once(input)
                .chain(hidden.iter().copied())
                .chain(std::iter::once(a.p))
                .collect()
        };
        let basis = match spec.basis {
            BasisSpec::Branch => Basis::Branch(Mlp::new(
                &mut store,
                "branch",
                &stack(a.latent, &a.branch_hidden),
                Activation::Tanh,
                Activation::Identity,
                seed("branch"),
            )?),
            BasisSpec::Pce { q } => Basis::Pce(PceBasis::new(a.latent, q)?),
        };
        let trunk_unsup = Mlp::new(
            &mut store,
            "trunk_unsup",
            &stack(spec.unsup_box.len(), &a.trunk_hidden),
            Activation::Tanh,
            Activation::Identity,
            seed("trunk_unsup"),
        )?;
        let trunk_sup = Mlp::new(
            &mut store,
            "trunk_sup",
            &stack(spec.sup_box.len(), &a.trunk_hidden),
            Activation::Tanh,
            Activation::Identity,
            seed("trunk_sup"),
        )?;
        Ok(Self {
            spec,
            store,
            encoder,
            basis,
            trunk_unsup,
            trunk_sup,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn latent_width(&self) -> usize {
        self.spec.arch.latent
    }

    pub fn basis_width(&self) -> usize {
        self.spec.arch.p
    }

    pub fn input_norm(&self) -> &FieldNorm {
        &self.spec.input_norm
    }

    pub fn output_norm(&self) -> &FieldNorm {
        &self.spec.output_norm
    }

    fn check_inputs(&self, x: &Tensor) -> Result<()> {
        let m = self.spec.n_inputs();
        if x.rank() != 2 || x.shape()[1] != m {
            return Err(Error::ShapeMismatch {
                op: "encode",
                lhs: vec![0, m],
                rhs: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Latent codes of normalized inputs `[B, m]`.
    pub fn encode_var<'t>(&self, tape: &'t Tape, p: &Bound<'t>, inputs: &Tensor) -> Result<Var<'t>> {
        self.check_inputs(inputs)?;
        let b = inputs.shape()[0];
        match (&self.encoder, &self.spec.encoder) {
            (Encoder::Conv { convs, dense }, _) => {
                let mut shape = vec![b, 1];
                shape.extend(&self.spec.input_extents);
                let mut x = tape.constant(inputs.clone()).reshape(shape)?;
                for c in convs {
                    x = c.forward(p, x)?;
                }
                let flat = x.shape()[1..].iter().product::<usize>();
                dense.forward(p, x.reshape([b, flat])?)
            }
            (Encoder::Pca, EncoderSpec::Pca { projection }) => {
                let data = (0..b).flat_map(|i| projection.whiten(inputs.row(i))).collect();
                Ok(tape.constant(Tensor::new([b, projection.retained()], data)?))
            }
            _ => unreachable!("encoder matches its spec"),
        }
    }

    /// Shared basis `φ(z)`, `[B, p]`.
    pub fn basis_var<'t>(&self, tape: &'t Tape, p: &Bound<'t>, z: Var<'t>) -> Result<Var<'t>> {
        match &self.basis {
            Basis::Branch(mlp) => mlp.forward(p, z),
            Basis::Pce(pce) => {
                let zt = z.value();
                let b = zt.shape()[0];
                let mut data = Vec::with_capacity(b * pce.len());
                for i in 0..b {
                    let xi: Vec<f64> = zt.row(i).iter().map(|&v| gaussian_to_unit(v)).collect();
                    data.extend(pce.eval(&xi)?);
                }
                Ok(tape.constant(Tensor::new([b, pce.len()], data)?))
            }
        }
    }

    /// Trunk outputs `[S, p]` at raw query coordinates `[S, d]`.
    pub fn trunk_var<'t>(&self, tape: &'t Tape, p: &Bound<'t>, head: Head, coords: &Tensor) -> Result<Var<'t>> {
        let (mlp, domain) = match head {
            Head::Reconstruction => (&self.trunk_unsup, &self.spec.unsup_box),
            Head::Solution => (&self.trunk_sup, &self.spec.sup_box),
        };
        if coords.rank() != 2 || coords.shape()[1] != domain.len() {
            return Err(Error::ShapeMismatch {
                op: "trunk",
                lhs: vec![0, domain.len()],
                rhs: coords.shape().to_vec(),
            });
        }
        let d = domain.len();
        let mut scaled = coords.clone();
        for (i, v) in scaled.data_mut().iter_mut().enumerate() {
            let [lo, hi] = domain[i % d];
            *v = 2.0 * (*v - lo) / (hi - lo) - 1.0;
        }
        mlp.forward(p, tape.constant(scaled))
    }

    /// Both heads for a given basis. Reconstruction and prediction read the
    /// very same `phi`.
    pub fn heads_from_basis<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        phi: Var<'t>,
        sensors: &Sensors,
    ) -> Result<(Var<'t>, Var<'t>, Var<'t>, Var<'t>)> {
        let a = self.trunk_var(tape, p, Head::Reconstruction, &sensors.unsup)?;
        let b = self.trunk_var(tape, p, Head::Solution, &sensors.sup)?;
        let k = phi.matmul_t(a)?;
        let u = phi.matmul_t(b)?;
        Ok((a, b, k, u))
    }

    pub fn forward<'t>(&self, tape: &'t Tape, p: &Bound<'t>, inputs: &Tensor, sensors: &Sensors) -> Result<Heads<'t>> {
        let z = self.encode_var(tape, p, inputs)?;
        let phi = self.basis_var(tape, p, z)?;
        let (a, b, k, u) = self.heads_from_basis(tape, p, phi, sensors)?;
        Ok(Heads { z, phi, a, b, k, u })
    }

    /// `MSE_k + MSE_u + w · (Σ|a|/S1 + Σ|b|/S2 + Σ|φ|/B)`: each output
    /// vector's L1 norm, averaged over the vectors of its kind.
    pub fn loss<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        batch: &Batch,
        sensors: &Sensors,
        penalty: Penalty,
    ) -> Result<LossParts<'t>> {
        if batch.inputs.rank() != 2 || batch.inputs.shape()[0] == 0 {
            return Err(Error::invalid("loss needs a non-empty batch"));
        }
        let h = self.forward(tape, p, &batch.inputs, sensors)?;
        if h.k.shape() != batch.inputs.shape() {
            return Err(Error::ShapeMismatch {
                op: "reconstruction loss",
                lhs: h.k.shape(),
                rhs: batch.inputs.shape().to_vec(),
            });
        }
        let mse_k = h.k.sub(tape.constant(batch.inputs.clone()))?.square().mean();
        let mse_u = h.u.sub(tape.constant(batch.targets.clone()))?.square().mean();
        let rows = |v: Var<'t>| v.shape()[0] as f64;
        let mut terms = vec![
            l1_penalty(tape, &[h.a])?.scale(1.0 / rows(h.a)),
            l1_penalty(tape, &[h.b])?.scale(1.0 / rows(h.b)),
        ];
        if penalty.on_branch {
            terms.push(l1_penalty(tape, &[h.phi])?.scale(1.0 / rows(h.phi)));
        }
        let mut pen = terms[0];
        for t in &terms[1..] {
            pen = pen.add(*t)?;
        }
        let item = |v: Var<'t>| v.value().item().expect("scalar");
        let parts_k = checked(item(mse_k), "mse_k")?;
        let parts_u = checked(item(mse_u), "mse_u")?;
        let parts_pen = checked(item(pen), "l1 penalty")?;
        let total = mse_k.add(mse_u)?.add(pen.scale(penalty.weight))?;
        checked(item(total), "total")?;
        Ok(LossParts {
            total,
            mse_k: parts_k,
            mse_u: parts_u,
            penalty: parts_pen,
        })
    }

    /// Normalized batch built from raw inputs and targets at `rows`.
    pub fn batch(&self, inputs: &FunctionEnsemble, targets: &FunctionEnsemble, rows: &[usize]) -> Result<Batch> {
        let (ni, no) = (&self.spec.input_norm, &self.spec.output_norm);
        if inputs.n_sensors() != self.spec.n_inputs() {
            return Err(Error::ShapeMismatch {
                op: "batch",
                lhs: vec![self.spec.n_inputs()],
                rhs: vec![inputs.n_sensors()],
            });
        }
        Ok(Batch {
            inputs: ni.forward(&inputs.rows_tensor(rows)?, &ni.mean),
            targets: no.forward(&targets.rows_tensor(rows)?, &no.mean_at(&targets.grid().coordinates())?),
        })
    }

    fn eval<R>(&self, f: impl for<'t> FnOnce(&'t Tape, &Bound<'t>) -> Result<R>) -> Result<R> {
        let tape = Tape::new();
        let p = self.store.bind(&tape);
        f(&tape, &p)
    }

    /// Latent codes `[B, latent]` of raw inputs `[B, m]`.
    pub fn encode(&self, inputs: &Tensor) -> Result<Tensor> {
        self.check_inputs(inputs)?;
        let n = &self.spec.input_norm;
        let x = n.forward(inputs, &n.mean);
        self.eval(|tape, p| Ok(self.encode_var(tape, p, &x)?.value()))
    }

    /// `φ(z)` for latent codes `[B, latent]`.
    pub fn basis(&self, z: &Tensor) -> Result<Tensor> {
        self.eval(|tape, p| Ok(self.basis_var(tape, p, tape.constant(z.clone()))?.value()))
    }

    pub fn trunk(&self, head: Head, coords: &Tensor) -> Result<Tensor> {
        self.eval(|tape, p| Ok(self.trunk_var(tape, p, head, coords)?.value()))
    }

    fn dot(&self, head: Head, z: &[f64], x: &[f64]) -> Result<f64> {
        let phi = self.basis(&Tensor::new([1, z.len()], z.to_vec())?)?;
        let t = self.trunk(head, &Tensor::new([1, x.len()], x.to_vec())?)?;
        Ok(phi.data().iter().zip(t.data()).map(|(a, b)| a * b).sum())
    }

    /// `a(x)·φ(z)` in normalized units.
    pub fn reconstruct(&self, z: &[f64], x: &[f64]) -> Result<f64> {
        self.dot(Head::Reconstruction, z, x)
    }

    /// `b(x′)·φ(z)` in normalized units.
    pub fn predict(&self, z: &[f64], x: &[f64]) -> Result<f64> {
        self.dot(Head::Solution, z, x)
    }

    /// Both heads in physical units for latent codes `[B, latent]`:
    /// `([B, S1], [B, S2])`.
    pub fn decode(&self, z: &Tensor, sensors: &Sensors) -> Result<(Tensor, Tensor)> {
        let (ni, no) = (&self.spec.input_norm, &self.spec.output_norm);
        let (mk, mu) = (ni.mean_at(&sensors.unsup)?, no.mean_at(&sensors.sup)?);
        self.eval(|tape, p| {
            let phi = self.basis_var(tape, p, tape.constant(z.clone()))?;
            let (_, _, k, u) = self.heads_from_basis(tape, p, phi, sensors)?;
            Ok((ni.inverse(&k.value(), &mk), no.inverse(&u.value(), &mu)))
        })
    }

    /// Both heads in physical units for raw inputs `[B, m]`.
    pub fn predict_batch(&self, inputs: &Tensor, sensors: &Sensors) -> Result<(Tensor, Tensor)> {
        let z = self.encode(inputs)?;
        self.decode(&z, sensors)
    }

    /// Predicted solutions for every sample of `inputs` on `grid`.
    pub fn predict_ensemble(&self, inputs: &FunctionEnsemble, grid: &SensorGrid) -> Result<FunctionEnsemble> {
        let sensors = Sensors {
            unsup: inputs.grid().coordinates(),
            sup: grid.coordinates(),
        };
        let n = inputs.n_samples();
        let mut out = Vec::with_capacity(n * grid.len());
        for start in (0..n).step_by(512) {
            let rows: Vec<usize> = (start..(start + 512).min(n)).collect();
            let (_, u) = self.predict_batch(&inputs.rows_tensor(&rows)?, &sensors)?;
            out.extend(u.into_data());
        }
        FunctionEnsemble::new(grid.clone(), out)
    }
}
