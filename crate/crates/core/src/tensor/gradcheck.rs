use super::{ParamId, Tape, Tensor, Var};
use crate::error::{Error, Result};

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params
        .iter()
        .enumerate()
        .map(|(i, p)| tape.param(ParamId(i), p.clone()))
        .collect();
    let out = f(&tape, &vars)?;
    let v = out
        .with_value(|t| t.item())
        .ok_or_else(|| Error::NonScalarLoss(out.shape()))?;
    if !v.is_finite() {
        return Err(Error::NonFinite("grad_check function value".into()));
    }
    Ok(v)
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` receives one tracked variable per entry of `params` (parameter ids are
/// the indices) and must return a scalar. The result is the maximum over all
/// parameter entries of `|autodiff − fd| / (|fd| + 1e-12)`.
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(step > 0.0) {
        return Err(Error::invalid("grad_check step must be positive"));
    }
    let grads = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = params
            .iter()
            .enumerate()
            .map(|(i, p)| tape.param(ParamId(i), p.clone()))
            .collect();
        let out = f(&tape, &vars)?;
        if !out.with_value(|t| t.all_finite()) {
            return Err(Error::NonFinite("grad_check function value".into()));
        }
        out.backward()?
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst = 0.0f64;
    for (i, p) in params.iter().enumerate() {
        let analytic = grads.get(ParamId(i)).expect("every parameter has a gradient");
        for j in 0..p.len() {
            let orig = p.data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = evaluate(&f, &work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = evaluate(&f, &work)?;
            work[i].data_mut()[j] = orig;
            let fd = (plus - minus) / (2.0 * step);
            let err = (analytic.data()[j] - fd).abs() / (fd.abs() + 1e-12);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
