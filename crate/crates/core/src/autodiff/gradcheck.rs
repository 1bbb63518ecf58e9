//! Finite-difference verification of tape gradients, run in `f64`.

use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-4;

fn evaluate<F>(f: &F, params: &[Tensor<f64>], requires_grad: bool) -> Result<(Tape<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = params
        .iter()
        .map(|p| tape.leaf(p.clone(), requires_grad))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::shape("grad_check", "function must return a single element"));
    }
    if !tape.value(out).is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    Ok((tape, vars, out))
}

/// Maximum over all parameter entries of
/// `|analytic − numeric| / max(1, |numeric|)`, with numeric gradients from
/// central differences of step [`FD_STEP`].
pub fn grad_check<F>(f: F, params: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let (mut tape, vars, out) = evaluate(&f, params, true)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let mut worst = 0.0f64;
    let mut probe = params.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        for j in 0..probe[pi].numel() {
            let orig = probe[pi].data()[j];
            probe[pi].data_mut()[j] = orig + FD_STEP;
            let (t, _, o) = evaluate(&f, &probe, false)?;
            let plus = t.value(o).data()[0];
            probe[pi].data_mut()[j] = orig - FD_STEP;
            let (t, _, o) = evaluate(&f, &probe, false)?;
            let minus = t.value(o).data()[0];
            probe[pi].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = (grad.data()[j] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
