//! Linear reduction of a random field by PCA, followed by a Legendre chaos
//! basis over the whitened PCA coordinates.

use multiauto::baselines::{binomial, gaussian_to_unit, pca_fit, PceBasis};
use multiauto::stoch::{gp_sample, KernelSpec, SensorGrid};

fn main() -> multiauto::Result<()> {
    let grid = SensorGrid::uniform_2d((-1.0, 1.0, 15), (-1.0, 1.0, 15));
    let kernel = KernelSpec::squared_exponential(0.5, 1.5)?;
    let e = gp_sample(&|p: &[f64]| 20.0 * (std::f64::consts::PI * (p[0] + p[1])).sin(), &kernel, &grid, 500, 3)?;

    for r in [1, 2, 3, 5, 8] {
        let pca = pca_fit(&e, r)?;
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..e.n_samples() {
            let v = e.sample(i);
            let back = pca.reconstruct(&pca.project(v));
            num += v.iter().zip(&back).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            den += v.iter().map(|a| a * a).sum::<f64>();
        }
        println!("r = {r}: relative reconstruction error {:.3e}", (num / den).sqrt());
    }

    let pca = pca_fit(&e, 3)?;
    let basis = PceBasis::new(3, 3)?;
    println!("chaos basis d = 3, order 3: {} terms (C(6,3) = {})", basis.len(), binomial(6, 3));
    let xi: Vec<f64> = pca.whiten(e.sample(0)).into_iter().map(gaussian_to_unit).collect();
    let psi = basis.eval(&xi)?;
    println!("first sample, mapped coordinates {xi:.3?}");
    println!("basis values {:.3?}", &psi[..6]);
    Ok(())
}
