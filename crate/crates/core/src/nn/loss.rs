//! Classification and statistics-matching losses, recorded on a [`Tape`].
//!
//! All classification losses average over the batch.

use crate::autograd::{Tape, Var};
use crate::error::{DfqError, Result};
use crate::nn::forward::BnInputStats;
use crate::nn::graph::BnStats;
use crate::tensor::Tensor;

/// Cross-entropy `mean_i −log softmax(z_i)[y_i]` (no label smoothing).
pub fn ce_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

/// Hard-label absolute loss: the negated target logit, `mean_i −z_i[y_i]`.
/// Its gradient with respect to each target logit is `−1/batch` everywhere.
pub fn abs_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let m = tape.target_logit_mean(logits, labels)?;
    tape.scale(m, -1.0)
}

fn one_hot(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 2 || labels.len() != shape[0] {
        return Err(DfqError::shape("one_hot", &shape, &[labels.len()]));
    }
    let c = shape[1];
    let mut t = Tensor::zeros(&shape);
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(DfqError::InvalidArgument(format!(
                "label {y} out of range for {c} classes"
            )));
        }
        t.data_mut()[i * c + y] = 1.0;
    }
    Ok(tape.constant(t))
}

/// Mean absolute error between softmax probabilities and the one-hot target,
/// averaged over batch and classes.
pub fn mae_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let target = one_hot(tape, logits, labels)?;
    let p = tape.softmax(logits)?;
    let d = tape.sub(p, target)?;
    let a = tape.abs(d)?;
    tape.mean(a)
}

/// Mean squared error between softmax probabilities and the one-hot target,
/// averaged over batch and classes.
pub fn mse_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let target = one_hot(tape, logits, labels)?;
    let p = tape.softmax(logits)?;
    let d = tape.sub(p, target)?;
    let s = tape.square(d)?;
    tape.mean(s)
}

/// `Σ_i ‖μ̂_i − μ_i‖² + ‖σ̂_i − σ_i‖²` over all batch-norm layers.
pub fn bns_loss(tape: &mut Tape, batch: &[BnInputStats], stored: &[BnStats]) -> Result<Var> {
    if batch.len() != stored.len() {
        return Err(DfqError::InvalidArgument(format!(
            "bns_loss: {} batch statistics vs {} stored layers",
            batch.len(),
            stored.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (b, s) in batch.iter().zip(stored) {
        let mu = tape.constant(Tensor::from_vec(s.mean_f64()));
        let sigma = tape.constant(Tensor::from_vec(s.std_f64()));
        let dm = tape.sub(b.mean, mu)?;
        let ds = tape.sub(b.std, sigma)?;
        let dm2 = tape.square(dm)?;
        let ds2 = tape.square(ds)?;
        let lm = tape.sum(dm2)?;
        let ls = tape.sum(ds2)?;
        let layer = tape.add(lm, ls)?;
        total = Some(match total {
            Some(t) => tape.add(t, layer)?,
            None => layer,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => Err(DfqError::Contract("bns_loss needs at least one batch-norm layer".into())),
    }
}

/// Value-only cross-entropy of a logits tensor.
pub fn ce_value(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let z = tape.constant(logits.clone());
    let l = ce_loss(&mut tape, z, labels)?;
    Ok(tape.value(l).item())
}
