use super::*;
use crate::error::Error;
use crate::nn::{Bound, ParamStore};
use crate::solvers::solve_growth_ode;
use crate::stoch::{gp_sample, linspace, FunctionEnsemble, KernelSpec, SensorGrid};
use crate::tensor::{grad_check, Tape, Tensor};

fn growth_data(n: usize, sensors: usize, seed: u64) -> (FunctionEnsemble, FunctionEnsemble) {
    let t = linspace(0.0, 1.0, sensors);
    let grid = SensorGrid::Line(t.clone());
    let kernel = KernelSpec::squared_exponential(1.0, 1.5).unwrap();
    let k = gp_sample(&|_| 0.0, &kernel, &grid, n, seed).unwrap();
    let u: Vec<Vec<f64>> = (0..n).map(|i| solve_growth_ode(&t, k.sample(i)).unwrap()).collect();
    let u = FunctionEnsemble::from_rows(grid, &u).unwrap();
    (k, u)
}

fn tiny_arch() -> ArchConfig {
    ArchConfig {
        latent: 2,
        p: 3,
        conv_channels: vec![2],
        conv_width: 3,
        encoder_hidden: vec![4],
        branch_hidden: vec![4],
        trunk_hidden: vec![4],
    }
}

fn tiny_model() -> (MultiAutoModel, FunctionEnsemble, FunctionEnsemble) {
    let (k, u) = growth_data(6, 5, 1);
    let spec = ModelSpec::fit(ModelKind::MultiAuto, &tiny_arch(), &k, &u, (3, 3), 4).unwrap();
    (MultiAutoModel::new(spec).unwrap(), k, u)
}

fn set_param(model: &mut MultiAutoModel, name: &str, f: impl Fn(usize, f64) -> f64) {
    let store = model.params_mut();
    let id = store.iter().find(|(_, n, _)| *n == name).map(|(id, _, _)| id).expect(name);
    for (i, v) in store.get_mut(id).data_mut().iter_mut().enumerate() {
        *v = f(i, *v);
    }
}

/// Makes the last layer of `net` output the constant vector `value`.
fn pin_output(model: &mut MultiAutoModel, net: &str, value: &[f64]) {
    let last = model
        .params()
        .iter()
        .filter(|(_, n, _)| n.starts_with(net) && n.ends_with(".weight"))
        .map(|(_, n, _)| n.trim_end_matches(".weight").to_string())
        .last()
        .unwrap();
    set_param(model, &format!("{last}.weight"), |_, _| 0.0);
    set_param(model, &format!("{last}.bias"), |i, _| value[i]);
}

fn sensors(k: &FunctionEnsemble, u: &FunctionEnsemble) -> Sensors {
    Sensors::of(k, u)
}

#[test]
fn encoder_widths_follow_config() {
    // 20×20 image input, latent 15
    let g2 = SensorGrid::uniform_2d((-1.0, 1.0, 20), (-1.0, 1.0, 20));
    let f = FunctionEnsemble::new(g2.clone(), (0..800).map(|i| (i as f64).sin()).collect()).unwrap();
    let arch = ArchConfig {
        latent: 15,
        ..ArchConfig::default()
    };
    let m = MultiAutoModel::new(ModelSpec::fit(ModelKind::MultiAuto, &arch, &f, &f, (3, 3), 0).unwrap()).unwrap();
    let z = m.encode(&f.to_tensor().unwrap()).unwrap();
    assert_eq!(z.shape(), &[2, 15]);
    assert_eq!(z, m.encode(&f.to_tensor().unwrap()).unwrap());

    // f(t) on 10 time sensors, latent 4, outputs over (x, t)
    let gt = SensorGrid::uniform(0.0, 0.1, 10);
    let f = FunctionEnsemble::new(gt, (0..30).map(|i| (i as f64).cos()).collect()).unwrap();
    let gxt = SensorGrid::uniform_2d((0.0, 4.0, 40), (0.0, 0.1, 10));
    let u = FunctionEnsemble::new(gxt, vec![0.5; 1200]).unwrap();
    let arch = ArchConfig {
        latent: 4,
        ..ArchConfig::default()
    };
    let m = MultiAutoModel::new(ModelSpec::fit(ModelKind::MultiAuto, &arch, &f, &u, (3, 3), 0).unwrap()).unwrap();
    assert_eq!(m.encode(&f.to_tensor().unwrap()).unwrap().shape(), &[3, 4]);
    let (k, pred) = m.predict_batch(&f.to_tensor().unwrap(), &Sensors::of(&f, &u)).unwrap();
    assert_eq!(k.shape(), &[3, 10]);
    assert_eq!(pred.shape(), &[3, 400]);
}

#[test]
fn encode_rejects_wrong_width() {
    let (m, _, _) = tiny_model();
    let err = m.encode(&Tensor::zeros([2, 6])).unwrap_err();
    assert!(matches!(err, Error::ShapeMismatch { .. }), "{err}");
}

#[test]
fn dot_product_heads() {
    let (mut m, _, _) = tiny_model();
    let z = [0.3, -0.8];
    let phi = m.basis(&Tensor::new([1, 2], z.to_vec()).unwrap()).unwrap();

    // unit trunk output selects φ₁
    let mut unit = m.clone();
    pin_output(&mut unit, "trunk_unsup", &[1.0, 0.0, 0.0]);
    pin_output(&mut unit, "trunk_sup", &[1.0, 0.0, 0.0]);
    assert_eq!(unit.reconstruct(&z, &[0.4]).unwrap(), phi.data()[0]);
    assert_eq!(unit.predict(&z, &[0.9]).unwrap(), phi.data()[0]);

    // zero branch output gives zero everywhere
    pin_output(&mut m, "branch", &[0.0; 3]);
    for x in [0.0, 0.5, 1.0] {
        assert_eq!(m.reconstruct(&z, &[x]).unwrap(), 0.0);
        assert_eq!(m.predict(&z, &[x]).unwrap(), 0.0);
    }
}

#[test]
fn scalar_basis_hand_composed() {
    // p = 1, no hidden layers: φ = w·z + c, a = v·x̂ + d with x̂ = 2x − 1
    let (k, u) = growth_data(4, 5, 2);
    let arch = ArchConfig {
        latent: 2,
        p: 1,
        conv_channels: vec![1],
        conv_width: 3,
        encoder_hidden: vec![],
        branch_hidden: vec![],
        trunk_hidden: vec![],
    };
    let mut m = MultiAutoModel::new(ModelSpec::fit(ModelKind::MultiAuto, &arch, &k, &u, (3, 3), 0).unwrap()).unwrap();
    set_param(&mut m, "branch.0.weight", |i, _| [0.7, -1.1][i]);
    set_param(&mut m, "branch.0.bias", |_, _| 0.2);
    set_param(&mut m, "trunk_unsup.0.weight", |_, _| 1.3);
    set_param(&mut m, "trunk_unsup.0.bias", |_, _| -0.4);
    set_param(&mut m, "trunk_sup.0.weight", |_, _| -0.6);
    set_param(&mut m, "trunk_sup.0.bias", |_, _| 0.9);
    let z = [0.5, 0.25];
    let phi = 0.7 * 0.5 - 1.1 * 0.25 + 0.2;
    let x = 0.75;
    let a = 1.3 * (2.0 * x - 1.0) - 0.4;
    let b = -0.6 * (2.0 * x - 1.0) + 0.9;
    assert!((m.reconstruct(&z, &[x]).unwrap() - a * phi).abs() < 1e-15);
    assert!((m.predict(&z, &[x]).unwrap() - b * phi).abs() < 1e-15);
}

#[test]
fn both_heads_see_the_same_branch_output() {
    let (mut m, k, u) = tiny_model();
    let sentinel = [0.125, -2.5, 7.0];
    pin_output(&mut m, "branch", &sentinel);
    let s = sensors(&k, &u);
    let batch = m.batch(&k, &u, &[0, 1, 2]).unwrap();
    let tape = Tape::new();
    let p = m.params().bind(&tape);
    let h = m.forward(&tape, &p, &batch.inputs, &s).unwrap();
    let (phi, a, b, kk, uu) = (h.phi.value(), h.a.value(), h.b.value(), h.k.value(), h.u.value());
    for i in 0..3 {
        assert_eq!(phi.row(i), &sentinel);
        for j in 0..5 {
            let ka: f64 = sentinel.iter().zip(a.row(j)).map(|(x, y)| x * y).sum();
            let ub: f64 = sentinel.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
            assert!((kk.at2(i, j) - ka).abs() < 1e-12);
            assert!((uu.at2(i, j) - ub).abs() < 1e-12);
        }
    }
}

#[test]
fn loss_special_values() {
    let (mut m, k, u) = tiny_model();
    let s = sensors(&k, &u);
    // outputs equal targets
    let batch = m.batch(&k, &u, &[0, 1]).unwrap();
    let tape = Tape::new();
    let p = m.params().bind(&tape);
    let h = m.forward(&tape, &p, &batch.inputs, &s).unwrap();
    let own = Batch {
        inputs: batch.inputs.clone(),
        targets: h.u.value(),
    };
    // k̃ targets the inputs themselves, so only the solution term can be pinned
    let tape = Tape::new();
    let p = m.params().bind(&tape);
    let parts = m.loss(&tape, &p, &own, &s, Penalty::NONE).unwrap();
    assert_eq!(parts.mse_u, 0.0);

    // constant-zero model on unit targets
    pin_output(&mut m, "branch", &[0.0; 3]);
    let ones = Batch {
        inputs: Tensor::filled([3, 5], 1.0),
        targets: Tensor::filled([3, 5], 1.0),
    };
    let tape = Tape::new();
    let p = m.params().bind(&tape);
    let parts = m.loss(&tape, &p, &ones, &s, Penalty::NONE).unwrap();
    assert_eq!(parts.total.value().item().unwrap(), 2.0);
    assert_eq!((parts.mse_k, parts.mse_u), (1.0, 1.0));
}

#[test]
fn perfect_fit_has_zero_loss() {
    // identity-like setup: zero trunk outputs and zero targets
    let (mut m, k, u) = tiny_model();
    pin_output(&mut m, "trunk_unsup", &[0.0; 3]);
    pin_output(&mut m, "trunk_sup", &[0.0; 3]);
    let s = sensors(&k, &u);
    let batch = Batch {
        inputs: Tensor::zeros([2, 5]),
        targets: Tensor::zeros([2, 5]),
    };
    let tape = Tape::new();
    let p = m.params().bind(&tape);
    let parts = m.loss(&tape, &p, &batch, &s, Penalty::NONE).unwrap();
    assert_eq!(parts.total.value().item().unwrap(), 0.0);
}

#[test]
fn loss_decomposes_into_mse_and_penalty() {
    let (m, k, u) = tiny_model();
    let s = sensors(&k, &u);
    let rows = [0, 2, 3, 5];
    let batch = m.batch(&k, &u, &rows).unwrap();
    let eval = |w: f64, on_branch: bool| {
        let tape = Tape::new();
        let p = m.params().bind(&tape);
        let parts = m
            .loss(&tape, &p, &batch, &s, Penalty { weight: w, on_branch })
            .unwrap();
        (parts.total.value().item().unwrap(), parts.penalty)
    };
    // independent penalty from the public evaluation API
    let z = m.encode(&k.rows_tensor(&rows).unwrap()).unwrap();
    let phi = m.basis(&z).unwrap();
    let a = m.trunk(Head::Reconstruction, &s.unsup).unwrap();
    let b = m.trunk(Head::Solution, &s.sup).unwrap();
    let l1 = |t: &Tensor| t.data().iter().map(|v| v.abs()).sum::<f64>() / t.shape()[0] as f64;
    let trunk_only = l1(&a) + l1(&b);
    let expected = trunk_only + l1(&phi);

    let (l0, _) = eval(0.0, true);
    let (lw, pen) = eval(0.01, true);
    assert!((pen - expected).abs() < 1e-12 * expected);
    assert!(((lw - l0) - 0.01 * expected).abs() < 1e-12 * lw);
    let (lt, pen_t) = eval(0.01, false);
    assert!((pen_t - trunk_only).abs() < 1e-12 * trunk_only);
    assert!(((lt - l0) - 0.01 * trunk_only).abs() < 1e-12 * lt);
}

#[test]
fn full_loss_passes_grad_check() {
    let (m, k, u) = tiny_model();
    let s = sensors(&k, &u);
    let batch = m.batch(&k, &u, &[0, 1, 2, 3]).unwrap();
    let params: Vec<Tensor> = m.params().iter().map(|(_, _, t)| t.clone()).collect();
    let err = grad_check(
        |tape, vars| {
            let p = Bound::from_vars(vars.to_vec());
            Ok(m.loss(tape, &p, &batch, &s, Penalty { weight: 0.05, on_branch: true })?.total)
        },
        &params,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn rescaling_branch_against_trunks_is_invariant() {
    let (m, k, u) = tiny_model();
    let s = sensors(&k, &u);
    let z = m.encode(&k.to_tensor().unwrap()).unwrap();
    let (k0, u0) = m.decode(&z, &s).unwrap();
    let c = 3.7;
    let mut scaled = m.clone();
    for (name, f) in [
        ("branch.1", c),
        ("trunk_unsup.1", 1.0 / c),
        ("trunk_sup.1", 1.0 / c),
    ] {
        set_param(&mut scaled, &format!("{name}.weight"), |_, v| v * f);
        set_param(&mut scaled, &format!("{name}.bias"), |_, v| v * f);
    }
    let (k1, u1) = scaled.decode(&z, &s).unwrap();
    for (x, y) in k0.data().iter().zip(k1.data()).chain(u0.data().iter().zip(u1.data())) {
        assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
    }
}

#[test]
fn reducers_share_the_decoder_shapes() {
    let (k, u) = growth_data(30, 12, 3);
    let arch = ArchConfig {
        latent: 3,
        p: 20,
        ..ArchConfig::default()
    };
    let s = sensors(&k, &u);
    let x = k.rows_tensor(&[0, 1, 2, 3]).unwrap();
    let mut shapes = Vec::new();
    for kind in [ModelKind::MultiAuto, ModelKind::Pca, ModelKind::Pce] {
        let m = MultiAutoModel::new(ModelSpec::fit(kind, &arch, &k, &u, (3, 3), 0).unwrap()).unwrap();
        assert_eq!(m.spec().kind(), kind);
        let z = m.encode(&x).unwrap();
        let (kk, uu) = m.decode(&z, &s).unwrap();
        shapes.push((z.shape().to_vec(), m.basis(&z).unwrap().shape().to_vec(), kk.shape().to_vec(), uu.shape().to_vec()));
    }
    assert!(shapes.windows(2).all(|w| w[0] == w[1]), "{shapes:?}");
    // PCA and PCE freeze the encoder: only branch and trunks are trainable
    let pce = MultiAutoModel::new(ModelSpec::fit(ModelKind::Pce, &arch, &k, &u, (3, 3), 0).unwrap()).unwrap();
    assert!(pce.params().iter().all(|(_, n, _)| n.starts_with("trunk")));
}

fn quick_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 20,
        learning_rate: 2e-3,
        final_learning_rate: 2e-3,
        patience: 0,
        ..TrainConfig::default()
    }
}

fn small_model(k: &FunctionEnsemble, u: &FunctionEnsemble) -> MultiAutoModel {
    let arch = ArchConfig {
        latent: 4,
        p: 12,
        conv_channels: vec![4],
        encoder_hidden: vec![16],
        branch_hidden: vec![20],
        trunk_hidden: vec![20],
        ..ArchConfig::default()
    };
    MultiAutoModel::new(ModelSpec::fit(ModelKind::MultiAuto, &arch, k, u, (3, 3), 0).unwrap()).unwrap()
}

#[test]
fn zero_epochs_leave_parameters() {
    let (k, u) = growth_data(50, 12, 0);
    let mut m = small_model(&k, &u);
    let before: ParamStore = m.params().clone();
    let r = train(&mut m, &k, &u, &quick_cfg(0)).unwrap();
    assert!(r.history.is_empty());
    assert_eq!(m.params(), &before);
}

#[test]
fn training_reduces_loss_and_is_reproducible() {
    let (k, u) = growth_data(100, 12, 0);
    let run = || {
        let mut m = small_model(&k, &u);
        let r = train(&mut m, &k, &u, &quick_cfg(40)).unwrap();
        (m, r)
    };
    let (m1, r1) = run();
    let (m2, r2) = run();
    let h = &r1.history;
    assert_eq!(h.train.len(), 40);
    assert_eq!(h.val.len(), 40);
    assert!(h.train[39] < h.train[0], "{} -> {}", h.train[0], h.train[39]);
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&r1.history.train), bits(&r2.history.train));
    assert_eq!(bits(&r1.history.val), bits(&r2.history.val));
    assert_eq!(m1.params(), m2.params());
    assert_eq!(r1.val_rows.len(), 10);
}

#[test]
fn oversized_batch_and_divergence_are_reported() {
    let (k, u) = growth_data(30, 12, 0);
    let mut m = small_model(&k, &u);
    let cfg = TrainConfig {
        batch_size: 28,
        ..quick_cfg(1)
    };
    assert!(train(&mut m, &k, &u, &cfg).is_err());

    let mut bad = k.values().to_vec();
    bad[5] = f64::NAN;
    let k_bad = FunctionEnsemble::new(k.grid().clone(), bad).unwrap();
    let mut m = small_model(&k, &u);
    let err = train(&mut m, &k_bad, &u, &quick_cfg(3)).unwrap_err();
    assert!(matches!(err, Error::Diverged { epoch: 1, .. }), "{err}");
}

#[test]
fn checkpoint_round_trip_reproduces_validation_loss() {
    let (k, u) = growth_data(60, 12, 5);
    let mut m = small_model(&k, &u);
    let cfg = TrainConfig {
        patience: 5,
        ..quick_cfg(15)
    };
    let report = train(&mut m, &k, &u, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    m.save(&path).unwrap();
    let back = MultiAutoModel::load(&path).unwrap();
    assert_eq!(back.params(), m.params());
    assert_eq!(back.spec(), m.spec());
    let x = k.to_tensor().unwrap();
    assert_eq!(back.encode(&x).unwrap(), m.encode(&x).unwrap());
    let (val, ..) = evaluate_loss(&back, &k, &u, &report.val_rows, cfg.penalty()).unwrap();
    assert!((val - report.best_loss).abs() <= 1e-12 * report.best_loss, "{val} vs {}", report.best_loss);

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[2] ^= 0xff;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(MultiAutoModel::load(&path), Err(Error::Format { .. })));
}

#[test]
fn checkpoint_rejects_other_architecture() {
    let (k, u) = growth_data(20, 12, 5);
    let m = small_model(&k, &u);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    m.save(&path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    // bump the version field
    bytes[8] = 9;
    std::fs::write(&path, &bytes).unwrap();
    let err = MultiAutoModel::load(&path).unwrap_err();
    assert!(err.to_string().contains("version"), "{err}");
}

#[test]
fn field_norm_centres_each_sensor_and_scales_to_unit_rms() {
    let grid = SensorGrid::uniform(0.0, 1.0, 3);
    let e = FunctionEnsemble::from_rows(grid, &[vec![1.0, 10.0, -4.0], vec![3.0, 14.0, -4.0]]).unwrap();
    let n = FieldNorm::fit(&e);
    assert_eq!(n.mean, vec![2.0, 12.0, -4.0]);
    // centered values ±1, ±2, 0 → rms sqrt(10/6)
    assert!((n.scale - (10.0f64 / 6.0).sqrt()).abs() < 1e-15);
    let t = e.to_tensor().unwrap();
    let z = n.forward(&t, &n.mean);
    let rms = (z.data().iter().map(|v| v * v).sum::<f64>() / 6.0).sqrt();
    assert!((rms - 1.0).abs() < 1e-14);
    let back = n.inverse(&z, &n.mean);
    for (a, b) in back.data().iter().zip(t.data()) {
        assert!((a - b).abs() < 1e-13);
    }
}

#[test]
fn field_norm_interpolates_the_mean_between_sensors() {
    let line = FieldNorm {
        grid: SensorGrid::Line(vec![0.0, 1.0, 3.0]),
        mean: vec![1.0, 3.0, -1.0],
        scale: 1.0,
    };
    let q = Tensor::new([5, 1], vec![-1.0, 0.5, 1.0, 2.0, 9.0]).unwrap();
    assert_eq!(line.mean_at(&q).unwrap(), vec![1.0, 2.0, 3.0, 1.0, -1.0]);

    // bilinear data is reproduced exactly
    let (x, y) = (vec![-1.0, 0.0, 1.0], vec![0.0, 2.0]);
    let f = |a: f64, b: f64| 1.0 + 2.0 * a - b + 0.5 * a * b;
    let mean = x.iter().flat_map(|&a| y.iter().map(move |&b| f(a, b))).collect();
    let plane = FieldNorm { grid: SensorGrid::Tensor { x, y }, mean, scale: 2.0 };
    let pts = [(-0.5, 0.3), (0.25, 1.9), (1.0, 0.0)];
    let q = Tensor::new([3, 2], pts.iter().flat_map(|&(a, b)| [a, b]).collect()).unwrap();
    for (m, &(a, b)) in plane.mean_at(&q).unwrap().iter().zip(&pts) {
        assert!((m - f(a, b)).abs() < 1e-14);
    }
    assert!(plane.mean_at(&Tensor::zeros([2, 1])).is_err());
}

#[test]
fn decoding_off_the_training_grid_uses_the_interpolated_mean() {
    let (m, k, u) = tiny_model();
    let z = m.encode(&k.to_tensor().unwrap()).unwrap();
    let on = m.decode(&z, &sensors(&k, &u)).unwrap().1;
    let fine = SensorGrid::uniform(0.0, 1.0, 9);
    let off = m.predict_ensemble(&k, &fine).unwrap();
    // every other fine point is a training sensor
    for i in 0..k.n_samples() {
        for j in 0..5 {
            assert!((off.sample(i)[2 * j] - on.at2(i, j)).abs() < 1e-12);
        }
    }
}
