//! Central-difference gradient oracle.

use crate::autograd::tape::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Compare the tape gradient of a scalar function against central
/// differences. Returns `max_i |analytic_i − numeric_i| / (|analytic_i| + 1e-8)`.
///
/// Any evaluation error or non-finite value yields `f64::INFINITY`, so the
/// result can always be compared against a tolerance.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> f64
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let analytic = match analytic_grad(&f, x) {
        Some(g) => g,
        None => return f64::INFINITY,
    };
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&f, &probe);
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&f, &probe);
        probe.data_mut()[i] = orig;
        let (Some(plus), Some(minus)) = (plus, minus) else {
            return f64::INFINITY;
        };
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / (a.abs() + 1e-8);
        if !err.is_finite() {
            return f64::INFINITY;
        }
        worst = worst.max(err);
    }
    worst
}

fn eval<F>(f: &F, x: &Tensor) -> Option<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), false);
    let out = f(&mut tape, v).ok()?;
    let val = tape.value(out);
    (val.numel() == 1 && val.item().is_finite()).then(|| val.item())
}

/// Tape gradient of a scalar function at `x` (zeros when `x` does not reach the root).
pub fn analytic_grad<F>(f: &F, x: &Tensor) -> Option<Tensor>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), true);
    let out = f(&mut tape, v).ok()?;
    if !tape.value(out).item().is_finite() {
        return None;
    }
    let mut grads = tape.backward(out).ok()?;
    Some(grads.take(v).unwrap_or_else(|| Tensor::zeros(x.shape())))
}
