//! Reverse-mode automatic differentiation over dense tensors.

mod gradcheck;
pub mod kernels;
mod tape;

pub use gradcheck::{analytic_grad, finite_diff_check};
pub use tape::{Gradients, Moments, Tape, Var};
