//! Trains the two-head model on the population-growth problem and prints
//! test metrics.
//!
//! `cargo run --release --example growth_forward -- [epochs] [l1_weight]`

use std::time::Instant;

use multiauto::harness::{
    data::{simulate, split_seeds},
    evaluate_model, train_model, ExperimentConfig, ModelChoice, Problem, Splits,
};

fn main() -> multiauto::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let mut config = ExperimentConfig::preset(Problem::GrowthOde);
    config.train.epochs = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    config.train.l1_weight = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(config.train.l1_weight);
    let (a, b) = split_seeds(config.seed);
    let t = Instant::now();
    let splits = Splits {
        train: simulate(&config, config.n_train, a)?,
        test: simulate(&config, config.n_test, b)?,
    };
    println!("data: {:.1?}", t.elapsed());
    let t = Instant::now();
    let (model, report) = train_model(&config, &splits.train, ModelChoice::MultiAuto)?;
    println!(
        "trained {} epochs in {:.1?} (best {} at epoch {})",
        report.history.len(),
        t.elapsed(),
        report.best_loss,
        report.best_epoch
    );
    let eval = evaluate_model(&config, &model, Some(&report), &splits, ModelChoice::MultiAuto)?;
    for r in &eval.rows {
        println!("{:>18} {:.5e}", r.metric, r.value);
    }
    Ok(())
}
