//! Central finite-difference gradient checking.

use super::{Tape, Tensor, Var};
use crate::{par, Error, Result};

/// Stabilizer in the relative-error denominator. Elements whose analytic
/// and numeric gradients are both far below it are compared absolutely.
pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error over every element of every input.
    pub max_rel_error: f64,
    /// Largest relative error per input, in input order.
    pub per_input: Vec<f64>,
    /// `(input, flat element)` of the worst element.
    pub worst: (usize, usize),
    pub tolerance: f64,
    pub passed: bool,
}

/// Checks the analytic gradient of the scalar function `f` with respect to
/// every element of `inputs` against central differences with step `h`.
///
/// `f` receives the inputs as leaves of a fresh tape and must return a
/// scalar. Finite differences for different elements are evaluated in
/// parallel.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> + Sync,
{
    let analytic = analytic_gradients(&f, inputs)?;
    let numeric = numeric_gradients(&f, inputs, h)?;
    Ok(compare_gradients(&analytic, &numeric, tol))
}

/// Gradients from one reverse sweep; inputs the loss ignores get zeros.
pub fn analytic_gradients<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let value = loss.value();
    check_scalar(&value)?;
    tape.backward(loss)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| v.grad().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect())
}

fn check_scalar(value: &Tensor) -> Result<f64> {
    let v = value.item()?;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("gradient-check objective ({v})")));
    }
    Ok(v)
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let value = out.value();
    check_scalar(&value)
}

/// `(f(x + h·e) − f(x − h·e)) / 2h` for every element.
pub fn numeric_gradients<F>(f: &F, inputs: &[Tensor], h: f64) -> Result<Vec<Tensor>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> + Sync,
{
    evaluate(f, inputs)?;
    let slots: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    let diffs = par::map(&slots, |&(i, j)| -> Result<f64> {
        let mut shifted = inputs.to_vec();
        let x = shifted[i].data()[j];
        shifted[i].data_mut()[j] = x + h;
        let plus = evaluate(f, &shifted)?;
        shifted[i].data_mut()[j] = x - h;
        let minus = evaluate(f, &shifted)?;
        Ok((plus - minus) / (2.0 * h))
    });
    let mut out: Vec<Tensor> = inputs.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
    for (&(i, j), d) in slots.iter().zip(diffs) {
        out[i].data_mut()[j] = d?;
    }
    Ok(out)
}

/// Max of `|a − n| / (|a| + |n| + ε)` per input.
pub fn compare_gradients(analytic: &[Tensor], numeric: &[Tensor], tol: f64) -> GradCheckReport {
    let mut per_input = Vec::with_capacity(analytic.len());
    let mut worst = (0, 0);
    let mut max_rel_error = 0.0f64;
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let mut input_max = 0.0f64;
        for (j, (&x, &y)) in a.data().iter().zip(n.data()).enumerate() {
            let rel = (x - y).abs() / (x.abs() + y.abs() + DEFAULT_EPSILON);
            let rel = if rel.is_nan() { f64::INFINITY } else { rel };
            if rel > input_max {
                input_max = rel;
            }
            if rel > max_rel_error {
                max_rel_error = rel;
                worst = (i, j);
            }
        }
        per_input.push(input_max);
    }
    GradCheckReport {
        max_rel_error,
        per_input,
        worst,
        tolerance: tol,
        passed: max_rel_error < tol,
    }
}
