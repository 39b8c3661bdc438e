use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::json;

use super::config::{ExperimentConfig, ModelChoice};
use super::data::{read_splits, sha256_file, simulate, split_seeds, write_splits, Manifest, Splits, DATA_FILES};
use super::models::{evaluate_model, train_model, Evaluation, Trained};
use crate::error::{Error, Result};
use crate::model::{TrainHistory, TrainReport};
use crate::uq::{write_metrics_csv, MetricRow};

/// Builds a directory under a temporary sibling name and renames it into
/// place once `build` succeeds, replacing any previous version.
pub fn commit_dir<T>(target: &Path, build: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
    let name = target
        .file_name()
        .ok_or_else(|| Error::invalid(format!("output path {} has no final component", target.display())))?
        .to_string_lossy()
        .into_owned();
    let parent = target.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let tmp = parent.join(format!(".{name}.partial-{}", std::process::id()));
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::create_dir(&tmp).map_err(|e| Error::io(&tmp, e))?;
    match build(&tmp) {
        Ok(v) => {
            if target.exists() {
                std::fs::remove_dir_all(target).map_err(|e| Error::io(target, e))?;
            }
            std::fs::rename(&tmp, target).map_err(|e| Error::io(target, e))?;
            Ok(v)
        }
        Err(e) => {
            let _ = std::fs::remove_dir_all(&tmp);
            Err(e)
        }
    }
}

/// Writes a file through a temporary name and a rename.
fn commit_file(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let tmp = path.with_extension(format!("partial-{}", std::process::id()));
    write(&tmp)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// The fields that determine the dataset.
fn data_key(c: &ExperimentConfig) -> serde_json::Value {
    json!([c.problem, c.kernel, c.kl, c.input_grid, c.output_grid, c.refine, c.n_train, c.n_test, c.seed])
}

/// Simulates both splits and writes them with a manifest into `out`.
pub fn generate(config: &ExperimentConfig, out: &Path) -> Result<Manifest> {
    config.validate()?;
    let (s_train, s_test) = split_seeds(config.seed);
    log::info!("generating {} ({} train, {} test)", config.name, config.n_train, config.n_test);
    let splits = Splits {
        train: simulate(config, config.n_train, s_train)?,
        test: simulate(config, config.n_test, s_test)?,
    };
    commit_dir(out, |dir| {
        write_splits(dir, &splits)?;
        let files = DATA_FILES
            .iter()
            .map(|f| Ok((f.to_string(), sha256_file(&dir.join(f))?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let mut echo = config.clone();
        echo.out = None;
        let manifest = Manifest {
            config: echo,
            seed: config.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            files,
        };
        manifest.write(dir)?;
        Ok(manifest)
    })
}

/// Loads the dataset of `out`, generating it first if absent. A dataset
/// produced from a different configuration is an error.
pub fn load_or_generate(config: &ExperimentConfig, out: &Path) -> Result<Splits> {
    if !out.join("manifest.json").exists() {
        generate(config, out)?;
    }
    let manifest = Manifest::load(out)?;
    if data_key(&manifest.config) != data_key(config) {
        return Err(Error::invalid(format!(
            "{} holds a dataset generated from a different configuration",
            out.display()
        )));
    }
    manifest.verify(out)?;
    read_splits(out)
}

fn model_dir(out: &Path, choice: ModelChoice) -> PathBuf {
    out.join("models").join(choice.name())
}

fn eval_dir(out: &Path, choice: ModelChoice) -> PathBuf {
    out.join("eval").join(choice.name())
}

fn report_json(r: &TrainReport) -> serde_json::Value {
    json!({
        "best_epoch": r.best_epoch,
        "best_loss": r.best_loss,
        "epochs_run": r.history.len(),
        "train_rows": r.train_rows.len(),
        "val_rows": r.val_rows.len(),
    })
}

/// Trains `choice` on the dataset of `out` and stores checkpoint, loss
/// history and report under `models/<choice>/`.
pub fn train_run(config: &ExperimentConfig, out: &Path, choice: ModelChoice) -> Result<(Trained, TrainReport)> {
    let splits = load_or_generate(config, out)?;
    let started = std::time::Instant::now();
    let (model, report) = train_model(config, &splits.train, choice).map_err(|e| match e {
        Error::Diverged { epoch, detail } => Error::Diverged {
            epoch,
            detail: format!("{} on {}: {detail}", choice, config.name),
        },
        other => other,
    })?;
    log::info!(
        "{} {}: {} epochs in {:.1?}, best validation loss {:.3e} at epoch {}",
        config.name,
        choice,
        report.history.len(),
        started.elapsed(),
        report.best_loss,
        report.best_epoch
    );
    commit_dir(&model_dir(out, choice), |dir| {
        model.save(&dir.join("model.ckpt"))?;
        report.history.write_csv(&dir.join("history.csv"))?;
        write_json(&dir.join("report.json"), &report_json(&report))
    })?;
    Ok((model, report))
}

fn load_report(dir: &Path) -> Result<TrainReport> {
    let path = dir.join("report.json");
    if !path.exists() {
        return Err(Error::MissingFile(path));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    let bad = || Error::Format {
        path: path.clone(),
        reason: "incomplete training report".into(),
    };
    Ok(TrainReport {
        history: TrainHistory::read_csv(&dir.join("history.csv"))?,
        best_epoch: v["best_epoch"].as_u64().ok_or_else(bad)? as usize,
        best_loss: v["best_loss"].as_f64().ok_or_else(bad)?,
        train_rows: vec![0; v["train_rows"].as_u64().ok_or_else(bad)? as usize],
        val_rows: vec![0; v["val_rows"].as_u64().ok_or_else(bad)? as usize],
    })
}

fn write_evaluation(dir: &Path, eval: &Evaluation) -> Result<()> {
    write_metrics_csv(&dir.join("metrics.csv"), &eval.rows)?;
    eval.stats.write_csv(&dir.join("mean_var.csv"))?;
    if let Some(c) = &eval.coefficients {
        c.write_csv(&dir.join("coefficients.csv"))?;
    }
    if let Some(g) = &eval.generated {
        g.write_csv(&dir.join("generated.csv"))?;
    }
    let metrics: BTreeMap<&str, f64> = eval.rows.iter().map(|r| (r.metric.as_str(), r.value)).collect();
    write_json(&dir.join("summary.json"), &json!({ "experiment": eval.rows[0].experiment, "metrics": metrics }))
}

/// Evaluates the stored `choice` model of `out` on the test split and
/// writes `eval/<choice>/`.
pub fn evaluate_run(config: &ExperimentConfig, out: &Path, choice: ModelChoice) -> Result<Vec<MetricRow>> {
    let splits = load_or_generate(config, out)?;
    let mdir = model_dir(out, choice);
    let ckpt = mdir.join("model.ckpt");
    if !ckpt.exists() {
        return Err(Error::MissingFile(ckpt));
    }
    let model = Trained::load(&ckpt, choice)?;
    let report = load_report(&mdir)?;
    let eval = evaluate_model(config, &model, Some(&report), &splits, choice)?;
    commit_dir(&eval_dir(out, choice), |dir| write_evaluation(dir, &eval))?;
    Ok(eval.rows)
}

/// Plain-text table with one column per model.
pub fn render_table(rows: &[MetricRow]) -> String {
    let mut experiments: Vec<&str> = Vec::new();
    let mut metrics: Vec<&str> = Vec::new();
    for r in rows {
        if !experiments.contains(&r.experiment.as_str()) {
            experiments.push(&r.experiment);
        }
        if !metrics.contains(&r.metric.as_str()) {
            metrics.push(&r.metric);
        }
    }
    let cell = |e: &str, m: &str| {
        rows.iter()
            .find(|r| r.experiment == e && r.metric == m)
            .map_or("-".to_string(), |r| format!("{:.5}", r.value))
    };
    let w0 = metrics.iter().map(|m| m.len()).max().unwrap_or(6).max(6);
    let widths: Vec<usize> = experiments.iter().map(|e| e.len().max(10)).collect();
    let mut out = format!("{:w0$}", "metric");
    for (e, w) in experiments.iter().zip(&widths) {
        write!(out, "  {e:>w$}").unwrap();
    }
    out.push('\n');
    for m in &metrics {
        write!(out, "{m:w0$}").unwrap();
        for (e, w) in experiments.iter().zip(&widths) {
            write!(out, "  {:>w$}", cell(e, m)).unwrap();
        }
        out.push('\n');
    }
    out
}

/// Trains and evaluates each model in `models` on one dataset, then writes
/// the combined `metrics.csv`, `summary.json` and `table.txt` into `out`.
pub fn run_experiment(config: &ExperimentConfig, out: &Path, models: &[ModelChoice]) -> Result<Vec<MetricRow>> {
    if models.is_empty() {
        return Err(Error::invalid("no models selected"));
    }
    load_or_generate(config, out)?;
    let mut rows = Vec::new();
    for &m in models {
        train_run(config, out, m)?;
        rows.extend(evaluate_run(config, out, m)?);
    }
    commit_file(&out.join("metrics.csv"), |p| write_metrics_csv(p, &rows))?;
    commit_file(&out.join("table.txt"), |p| {
        std::fs::write(p, render_table(&rows)).map_err(|e| Error::io(p, e))
    })?;
    let summary: BTreeMap<String, BTreeMap<&str, f64>> = models
        .iter()
        .map(|m| {
            let id = format!("{}/{}", config.name, m);
            let metrics = rows
                .iter()
                .filter(|r| r.experiment == id)
                .map(|r| (r.metric.as_str(), r.value))
                .collect();
            (id, metrics)
        })
        .collect();
    commit_file(&out.join("summary.json"), |p| {
        write_json(p, &json!({ "experiment": config.name, "seed": config.seed, "models": summary }))
    })?;
    Ok(rows)
}

/// `run_experiment` over the configured model list.
pub fn compare(config: &ExperimentConfig, out: &Path) -> Result<Vec<MetricRow>> {
    run_experiment(config, out, &config.models)
}

/// One experiment per input sensor count in `sweep_sensors`, each in
/// `out/n<count>/`, run concurrently. Aggregates go to `out/sweep.csv` and
/// `out/sweep.txt`.
pub fn sweep(config: &ExperimentConfig, out: &Path, model: ModelChoice) -> Result<Vec<MetricRow>> {
    if config.sweep_sensors.is_empty() {
        return Err(Error::invalid("sweep_sensors is empty"));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let per_point: Vec<Vec<MetricRow>> = config
        .sweep_sensors
        .par_iter()
        .map(|&n| {
            let sub = config.with_input_sensors(n);
            run_experiment(&sub, &out.join(format!("n{n}")), &[model])
        })
        .collect::<Result<_>>()?;
    let rows: Vec<MetricRow> = per_point.into_iter().flatten().collect();
    commit_file(&out.join("sweep.csv"), |p| write_metrics_csv(p, &rows))?;
    let mut table = format!("{:>8}  {:>12}  {:>16}\n", "sensors", "test_mse", "test_avg_rel_l2");
    for &n in &config.sweep_sensors {
        let id = format!("{}-n{n}/{model}", config.name);
        let get = |m: &str| rows.iter().find(|r| r.experiment == id && r.metric == m).map_or(f64::NAN, |r| r.value);
        writeln!(table, "{n:>8}  {:>12.5e}  {:>16.5e}", get("test_mse"), get("test_avg_rel_l2")).unwrap();
    }
    commit_file(&out.join("sweep.txt"), |p| std::fs::write(p, table).map_err(|e| Error::io(p, e)))?;
    Ok(rows)
}

/// Applies `MULTIAUTO_THREADS` to the global worker pool and returns the
/// thread count in use.
pub fn configure_threads() -> Result<usize> {
    if let Ok(v) = std::env::var("MULTIAUTO_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("MULTIAUTO_THREADS={v:?} is not a thread count")))?;
        // a pool built earlier in the process stays in place
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(rayon::current_num_threads())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::Problem;

    fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig::preset(Problem::GrowthOde);
        c.name = "tiny".into();
        c.input_grid[0].n = 8;
        c.output_grid[0].n = 6;
        c.n_train = 30;
        c.n_test = 10;
        c.arch.latent = 3;
        c.arch.p = 6;
        c.arch.conv_channels = vec![2];
        c.arch.conv_width = 3;
        c.arch.encoder_hidden = vec![8];
        c.arch.branch_hidden = vec![8];
        c.arch.trunk_hidden = vec![8];
        c.train.epochs = 2;
        c.train.batch_size = 9;
        c.kde_samples = 20;
        c.sweep_sensors = vec![6, 8];
        c
    }

    #[test]
    fn commit_dir_is_all_or_nothing() {
        let root = tempfile::tempdir().unwrap();
        let target = root.path().join("run");
        let err = commit_dir(&target, |d| -> Result<()> {
            std::fs::write(d.join("a"), b"1").unwrap();
            Err(Error::invalid("boom"))
        });
        assert!(err.is_err());
        assert!(!target.exists());
        assert_eq!(std::fs::read_dir(root.path()).unwrap().count(), 0);
        commit_dir(&target, |d| std::fs::write(d.join("a"), b"1").map_err(|e| Error::io(d, e))).unwrap();
        commit_dir(&target, |d| std::fs::write(d.join("b"), b"2").map_err(|e| Error::io(d, e))).unwrap();
        assert!(!target.join("a").exists() && target.join("b").exists());
    }

    #[test]
    fn generate_is_byte_reproducible() {
        let c = tiny();
        let root = tempfile::tempdir().unwrap();
        let m1 = generate(&c, &root.path().join("a")).unwrap();
        let m2 = generate(&c, &root.path().join("b")).unwrap();
        assert_eq!(m1.files, m2.files);
        for f in DATA_FILES {
            assert_eq!(
                std::fs::read(root.path().join("a").join(f)).unwrap(),
                std::fs::read(root.path().join("b").join(f)).unwrap()
            );
        }
    }

    #[test]
    fn bad_grids_write_nothing() {
        let mut c = tiny();
        c.problem = Problem::Poisson1dInverse;
        c.output_grid[0].n = 7;
        let root = tempfile::tempdir().unwrap();
        assert!(generate(&c, &root.path().join("x")).is_err());
        assert_eq!(std::fs::read_dir(root.path()).unwrap().count(), 0);
    }

    #[test]
    fn experiment_files_and_mismatch() {
        let c = tiny();
        let root = tempfile::tempdir().unwrap();
        let out = root.path().join("run");
        let rows = run_experiment(&c, &out, &[ModelChoice::MultiAuto, ModelChoice::Pca]).unwrap();
        for f in ["metrics.csv", "summary.json", "table.txt", "manifest.json", "models/pca/model.ckpt", "eval/multiauto/generated.csv"] {
            assert!(out.join(f).exists(), "{f}");
        }
        assert!(rows.iter().any(|r| r.experiment == "tiny/pca" && r.metric == "var_rel_l2"));
        let table = std::fs::read_to_string(out.join("table.txt")).unwrap();
        assert!(table.contains("tiny/multiauto") && table.contains("sparsity_phi"));

        let mut other = c.clone();
        other.n_train = 31;
        assert!(train_run(&other, &out, ModelChoice::Pca).is_err());
        assert!(matches!(evaluate_run(&c, &out, ModelChoice::Pce), Err(Error::MissingFile(_))));
    }

    #[test]
    fn sweep_writes_each_point() {
        let c = tiny();
        let root = tempfile::tempdir().unwrap();
        let rows = sweep(&c, root.path(), ModelChoice::MultiAuto).unwrap();
        assert!(root.path().join("n6/metrics.csv").exists());
        assert!(rows.iter().any(|r| r.experiment == "tiny-n8/multiauto"));
        let t = std::fs::read_to_string(root.path().join("sweep.txt")).unwrap();
        assert_eq!(t.lines().count(), 3);
    }
}
