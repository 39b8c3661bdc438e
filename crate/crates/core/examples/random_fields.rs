//! Gaussian-process sampling and Karhunen–Loève truncation.
//!
//! Draws squared-exponential and exponential samples on [0, 1], compares the
//! empirical pointwise variance with the kernel diagonal, and reports how
//! much variance the leading KL modes capture.

use multiauto::stoch::{gp_sample, kl_field_sample, kl_modes, KernelSpec, SensorGrid};
use multiauto::uq::ensemble_stats;

fn main() -> multiauto::Result<()> {
    let grid = SensorGrid::uniform(0.0, 1.0, 101);
    for kernel in [KernelSpec::squared_exponential(1.0, 0.2)?, KernelSpec::exponential(1.0, 0.2)?] {
        let e = gp_sample(&|_| 0.0, &kernel, &grid, 4000, 7)?;
        let s = ensemble_stats(&e)?;
        let v = s.variance.iter().sum::<f64>() / s.variance.len() as f64;
        println!("{:?}: mean pointwise variance {v:.4} (kernel {:.4})", kernel.family, kernel.sigma * kernel.sigma);
        for m in [1, 3, 5, 10, 20] {
            let basis = kl_modes(&kernel, &grid, m)?;
            println!("  {m:>2} modes capture {:>6.2}%", 100.0 * basis.captured_fraction());
        }
    }

    let kernel = KernelSpec::exponential(1.0, 0.25)?;
    let basis = kl_modes(&kernel, &grid, 3)?;
    let fields = kl_field_sample(&basis, 0.1, 5, 11)?;
    for i in 0..fields.n_samples() {
        let row = fields.sample(i);
        println!("field {i}: f(0) = {:+.4}, f(1) = {:+.4}, latent {:.3?}", row[0], row[row.len() - 1], fields.latent(i).unwrap_or(&[]));
    }
    Ok(())
}
