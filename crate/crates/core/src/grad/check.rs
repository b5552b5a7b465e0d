//! Central finite-difference checks of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a gradient check over a list of parameter tensors.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst relative error per parameter tensor, in input order.
    pub per_param: Vec<f64>,
    /// Worst relative error overall.
    pub max_rel_error: f64,
    /// `(param index, flat coordinate, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Analytic gradients of `loss_fn` at `params`, one tensor per parameter
/// (zeros where the loss does not depend on it).
pub fn analytic_gradients<F>(loss_fn: &F, params: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = loss_fn(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    Ok(vars
        .iter()
        .zip(params)
        .map(|(v, p)| {
            grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.shape()))
        })
        .collect())
}

fn eval_loss<F>(loss_fn: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let loss = loss_fn(&mut tape, &vars)?;
    let v = tape.value(loss);
    if v.numel() != 1 {
        return Err(Error::Usage(format!("loss must be scalar, got {:?}", v.shape())));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {v}")));
    }
    Ok(v)
}

/// Compare supplied analytic gradients against central differences of
/// `loss_fn`. Relative error per coordinate is
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn compare_with_finite_differences<F>(
    loss_fn: &F,
    params: &[Tensor],
    analytic: &[Tensor],
    step: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::Numeric(format!("finite-difference step must be > 0, got {step}")));
    }
    if analytic.len() != params.len() {
        return Err(Error::Usage("one analytic gradient per parameter required".into()));
    }
    // Surface a non-finite loss before perturbing anything.
    eval_loss(loss_fn, params)?;
    let mut work: Vec<Tensor> = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    let mut max_rel_error = 0.0;
    let mut worst = None;
    for (pi, grad) in analytic.iter().enumerate() {
        let mut param_worst: f64 = 0.0;
        for ci in 0..params[pi].numel() {
            let orig = params[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + step;
            let plus = eval_loss(loss_fn, &work)?;
            work[pi].data_mut()[ci] = orig - step;
            let minus = eval_loss(loss_fn, &work)?;
            work[pi].data_mut()[ci] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.data()[ci];
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            param_worst = param_worst.max(rel);
            if worst.is_none() || rel > max_rel_error {
                max_rel_error = rel;
                worst = Some((pi, ci, a, numeric));
            }
        }
        per_param.push(param_worst);
    }
    Ok(GradCheckReport {
        per_param,
        max_rel_error,
        worst,
    })
}

/// Run the tape's backward pass on `loss_fn` and check it against central
/// differences with the given `step`.
pub fn finite_diff_check<F>(loss_fn: F, params: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Numeric(format!("finite-difference step must be > 0, got {step}")));
    }
    let analytic = analytic_gradients(&loss_fn, params)?;
    compare_with_finite_differences(&loss_fn, params, &analytic, step)
}
