//! Dense reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every forward op together with the values needed by
//! its backward rule. Values are checked for NaN/Inf after each op.

mod gradcheck;
mod real;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, DEFAULT_EPS};
pub use real::{Precision, Real};
pub use tape::{Gradients, Tape, Var, NORM_EPS};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
