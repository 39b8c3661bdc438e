//! Convergence of the reference solvers against closed-form solutions.

use std::f64::consts::PI;

use multiauto::solvers::{kdv_solution, solve_growth_ode, solve_poisson_1d, solve_poisson_2d, Field2D};
use multiauto::stoch::linspace;

fn max_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn main() -> multiauto::Result<()> {
    println!("growth ODE u' = k u, k = cos(2 pi t)");
    for n in [11, 21, 41, 81] {
        let t = linspace(0.0, 1.0, n);
        let k: Vec<f64> = t.iter().map(|&s| (2.0 * PI * s).cos()).collect();
        let exact: Vec<f64> = t.iter().map(|&s| ((2.0 * PI * s).sin() / (2.0 * PI)).exp()).collect();
        println!("  n = {n:>3}  max error {:.3e}", max_err(&solve_growth_ode(&t, &k)?, &exact));
    }

    println!("1D Poisson -u'' = pi^2 sin(pi x)");
    for n in [11, 21, 41, 81] {
        let x = linspace(-1.0, 1.0, n);
        let f: Vec<f64> = x.iter().map(|&s| PI * PI * (PI * s).sin()).collect();
        let exact: Vec<f64> = x.iter().map(|&s| (PI * s).sin()).collect();
        println!("  n = {n:>3}  max error {:.3e}", max_err(&solve_poisson_1d(&x, &f)?, &exact));
    }

    println!("2D Poisson -lap u = 2 pi^2 sin(pi x) sin(pi y)");
    for n in [11, 21, 41] {
        let g = linspace(-1.0, 1.0, n);
        let f = Field2D::from_fn(g.clone(), g.clone(), |x, y| 2.0 * PI * PI * (PI * x).sin() * (PI * y).sin());
        let exact = Field2D::from_fn(g.clone(), g.clone(), |x, y| (PI * x).sin() * (PI * y).sin());
        println!("  n = {n:>3}  max error {:.3e}", max_err(&solve_poisson_2d(&f)?.values, &exact.values));
    }

    println!("KdV soliton, unforced and with constant forcing 0.5");
    let t = linspace(0.0, 0.1, 11);
    let x = linspace(0.0, 4.0, 9);
    for c in [0.0, 0.5] {
        let u = kdv_solution(&t, &vec![c; t.len()], &x, &[0.1])?;
        let peak = u.values.iter().cloned().fold(f64::INFINITY, f64::min);
        println!("  forcing {c}: min u(., 0.1) = {peak:.4}");
    }
    Ok(())
}
