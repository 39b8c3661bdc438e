//! End-to-end experiment on a reduced budget: simulate, train every model
//! listed for the problem, evaluate, and render plots into a run directory.
//!
//! `cargo run --release --example experiment -- [problem] [out-dir]`
//!
//! `problem` is one of growth-ode, poisson1d-inverse, poisson2d-forward,
//! kdv-forward.

use std::path::PathBuf;

use multiauto::harness::{emit_plots, run::render_table, run_experiment, ExperimentConfig, Problem};

fn main() -> multiauto::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let problem: Problem = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(Problem::Poisson2dForward);
    let out = args
        .get(2)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join(format!("multiauto-{problem}")));
    let mut config = ExperimentConfig::preset(problem);
    config.n_train = config.n_train.min(400);
    config.n_test = config.n_test.min(200);
    config.train.epochs = 200;
    config.kde_samples = config.kde_samples.min(500);

    let rows = run_experiment(&config, &out, &config.models.clone())?;
    print!("{}", render_table(&rows));
    for p in emit_plots(&out)? {
        println!("{}", p.display());
    }
    Ok(())
}
