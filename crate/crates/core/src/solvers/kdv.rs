use super::{cumulative_trapezoid, Field2D};
use crate::error::{Error, Result};

fn sech2(z: f64) -> f64 {
    let c = z.cosh();
    1.0 / (c * c)
}

/// Piecewise-linear interpolation of `v` (on increasing `t`) at `q`.
fn interpolate(t: &[f64], v: &[f64], q: f64) -> f64 {
    let hi = t.partition_point(|&s| s < q);
    if hi == 0 {
        return v[0];
    }
    if hi == t.len() {
        return v[t.len() - 1];
    }
    if t[hi] == q {
        return v[hi];
    }
    let a = (q - t[hi - 1]) / (t[hi] - t[hi - 1]);
    v[hi - 1] + a * (v[hi] - v[hi - 1])
}

/// `u(x, t) = W(t) − 2 sech²(x − 4t + 6 ∫₀ᵗ W)` with `W = ∫₀ᵗ f`.
///
/// `f` is given on the time grid `t` starting at 0. Both integrals use the
/// cumulative trapezoid rule; query times between nodes are interpolated
/// linearly. The result is laid out over `(x, query)`.
pub fn kdv_solution(t: &[f64], f: &[f64], x: &[f64], query: &[f64]) -> Result<Field2D> {
    if t.is_empty() || t.len() != f.len() {
        return Err(Error::ShapeMismatch {
            op: "kdv_solution",
            lhs: vec![t.len()],
            rhs: vec![f.len()],
        });
    }
    if t[0] != 0.0 || t.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("forcing time grid must start at 0 and increase"));
    }
    let end = t[t.len() - 1];
    if let Some(q) = query.iter().find(|&&q| !(0.0..=end).contains(&q)) {
        return Err(Error::invalid(format!("query time {q} outside [0, {end}]")));
    }
    let w = cumulative_trapezoid(t, f);
    let iw = cumulative_trapezoid(t, &w);
    let at: Vec<(f64, f64, f64)> = query
        .iter()
        .map(|&q| (q, interpolate(t, &w, q), interpolate(t, &iw, q)))
        .collect();
    let values = x
        .iter()
        .flat_map(|&xi| at.iter().map(move |&(q, wq, iwq)| wq - 2.0 * sech2(xi - 4.0 * q + 6.0 * iwq)))
        .collect();
    Field2D::new(x.to_vec(), query.to_vec(), values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stoch::linspace;

    #[test]
    fn unforced_soliton() {
        let t = linspace(0.0, 0.1, 11);
        let x = linspace(0.0, 4.0, 40);
        let u = kdv_solution(&t, &[0.0; 11], &x, &t).unwrap();
        for (i, xi) in x.iter().enumerate() {
            for (j, tj) in t.iter().enumerate() {
                assert_eq!(u.at(i, j), -2.0 * sech2(xi - 4.0 * tj));
            }
        }
    }

    #[test]
    fn initial_condition_for_any_forcing() {
        let t = linspace(0.0, 0.1, 21);
        let f: Vec<f64> = t.iter().map(|s| (30.0 * s).sin() * 2.0).collect();
        let x = linspace(0.0, 4.0, 17);
        let u = kdv_solution(&t, &f, &x, &[0.0]).unwrap();
        for (i, xi) in x.iter().enumerate() {
            assert_eq!(u.at(i, 0), -2.0 * sech2(*xi));
        }
    }

    #[test]
    fn constant_forcing_closed_form() {
        let c = 0.37;
        let t = linspace(0.0, 0.1, 13);
        let x = linspace(0.0, 4.0, 9);
        let query = [0.0, 0.025, 0.05, 0.1];
        let u = kdv_solution(&t, &[c; 13], &x, &query).unwrap();
        for (i, xi) in x.iter().enumerate() {
            for (j, q) in query.iter().enumerate() {
                let exact = c * q - 2.0 * sech2(xi - 4.0 * q + 3.0 * c * q * q);
                assert!((u.at(i, j) - exact).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn time_refinement_is_second_order() {
        // f = cos(20t): W = sin(20t)/20, ∫W = (1 − cos(20t))/400
        let exact = |x: f64, s: f64| {
            let w = (20.0 * s).sin() / 20.0;
            w - 2.0 * sech2(x - 4.0 * s + 6.0 * (1.0 - (20.0 * s).cos()) / 400.0)
        };
        let err = |n: usize| {
            let t = linspace(0.0, 0.1, n);
            let f: Vec<f64> = t.iter().map(|s| (20.0 * s).cos()).collect();
            let x = linspace(0.0, 4.0, 21);
            let u = kdv_solution(&t, &f, &x, &[0.1]).unwrap();
            (0..21).map(|i| (u.at(i, 0) - exact(x[i], 0.1)).abs()).fold(0.0, f64::max)
        };
        let order = (err(11) / err(21)).log2();
        assert!((1.8..=2.2).contains(&order), "{order}");
    }

    #[test]
    fn query_outside_grid_fails() {
        let t = linspace(0.0, 0.1, 5);
        assert!(kdv_solution(&t, &[0.0; 5], &[1.0], &[0.2]).is_err());
    }
}
