use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use multiauto::harness::{self, ExperimentConfig, ModelChoice, Problem};

#[derive(Parser)]
#[command(version, about = "Autoencoder DeepONet experiments for stochastic differential equations")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
    /// Experiment config (JSON) or a run manifest.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Preset used when no config is given.
    #[arg(long, global = true, default_value = "growth-ode", value_parser = parse::<Problem>)]
    problem: Problem,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, default_value = "multiauto", value_parser = parse::<ModelChoice>)]
    model: ModelChoice,
    /// Overrides the training epoch budget.
    #[arg(long, global = true)]
    epochs: Option<usize>,
}

#[derive(Subcommand)]
enum Verb {
    /// Simulate the training and test datasets.
    Generate,
    /// Train one model.
    Train,
    /// Evaluate a trained model on the test set.
    Evaluate,
    /// Train and evaluate every model listed in the config.
    Compare,
    /// Render SVG plots of a run directory.
    Plot,
    /// Repeat the experiment over the configured input sensor counts.
    Sweep,
}

fn parse<T: std::str::FromStr<Err = multiauto::Error>>(s: &str) -> Result<T, String> {
    s.parse().map_err(|e: multiauto::Error| e.to_string())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let threads = harness::configure_threads()?;
    let mut config = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::preset(cli.problem),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(e) = cli.epochs {
        config.train.epochs = e;
    }
    config.validate()?;
    let out = cli
        .out
        .clone()
        .or_else(|| config.out.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(&config.name));
    log::info!("{} threads, run directory {}", threads, out.display());
    let show = |rows: &[multiauto::uq::MetricRow]| print!("{}", harness::run::render_table(rows));
    match cli.verb {
        Verb::Generate => {
            let m = harness::generate(&config, &out)?;
            for (f, h) in &m.files {
                println!("{h}  {f}");
            }
        }
        Verb::Train => {
            let (_, r) = harness::train_run(&config, &out, cli.model)?;
            println!(
                "{}: {} epochs, best validation loss {:.6e} at epoch {}",
                cli.model,
                r.history.len(),
                r.best_loss,
                r.best_epoch
            );
        }
        Verb::Evaluate => show(&harness::evaluate_run(&config, &out, cli.model)?),
        Verb::Compare => show(&harness::compare(&config, &out)?),
        Verb::Sweep => {
            harness::sweep(&config, &out, cli.model)?;
            print!("{}", std::fs::read_to_string(out.join("sweep.txt"))?);
        }
        Verb::Plot => {
            for p in harness::emit_plots(&out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
