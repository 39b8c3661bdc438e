//! Generative use of a trained two-head model: fit a Gaussian KDE to the
//! encoded training latents, decode fresh draws, and compare the generated
//! ensemble statistics with the held-out solutions.
//!
//! `cargo run --release --example latent_generation -- [epochs] [samples]`

use multiauto::harness::data::{simulate, split_seeds};
use multiauto::harness::{config::grid_of, train_model, ExperimentConfig, ModelChoice, Problem, Trained};
use multiauto::uq::{ensemble_stats, generate_ensemble, kde_fit, rel_l2};

fn main() -> multiauto::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let mut config = ExperimentConfig::preset(Problem::GrowthOde);
    config.train.epochs = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let n: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3000);
    let (a, b) = split_seeds(config.seed);
    let train = simulate(&config, config.n_train, a)?;
    let test = simulate(&config, config.n_test, b)?;

    let (Trained::TwoHead(model), _) = train_model(&config, &train, ModelChoice::MultiAuto)? else {
        unreachable!("multiauto trains a two-head model")
    };
    let kde = kde_fit(&model.encode(&train.inputs.to_tensor()?)?)?;
    println!("latent width {}, Scott bandwidths {:.4?}", kde.dim(), kde.bandwidth());

    let (input_grid, output_grid) = (grid_of(&config.input_grid)?, grid_of(&config.output_grid)?);
    let (k, u) = generate_ensemble(&model, &kde, &input_grid, &output_grid, n, 5)?;
    for (name, generated, reference) in [("k", &k, &test.inputs), ("u", &u, &test.targets)] {
        let g = ensemble_stats(generated)?;
        let r = ensemble_stats(reference)?;
        println!(
            "{name}: mean rel l2 {:.4}, variance rel l2 {:.4}",
            rel_l2(&g.mean, &r.mean)?,
            rel_l2(&g.variance, &r.variance)?
        );
    }
    Ok(())
}
