//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] is rebuilt for every forward pass. Parameters enter as
//! trainable leaves ([`Tape::param`]), data and frozen weights as constants
//! ([`Tape::constant`]); [`Tape::backward`] then returns gradients for the
//! trainable leaves only.

mod check;
pub(crate) mod kernel;
mod tape;
mod tensor;

pub use check::{
    analytic_gradients, compare_with_finite_differences, finite_diff_check, GradCheckReport,
};
pub use tape::{Gradients, Primitive, Tape, Var};
pub use tensor::Tensor;
