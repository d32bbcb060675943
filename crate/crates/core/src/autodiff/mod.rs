//! Minimal reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] owns every value computed in one forward pass. Operations
//! return [`Var`] handles; [`Tape::backward`] walks the tape in reverse
//! record order and returns [`Gradients`] for every node that depends on a
//! parameter leaf.
//!
//! ```
//! use voco::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let u = tape.param(Tensor::vector(vec![3.0, 4.0]));
//! let d = tape.dot(u, u).unwrap();
//! let grads = tape.backward(d).unwrap();
//! assert_eq!(tape.scalar(d), 25.0);
//! assert_eq!(grads.get(u).unwrap(), &[6.0, 8.0]);
//! ```
//!
//! Conventions: `abs` and `relu` have derivative 0 at 0; `clamp_max` and
//! `clamp_min` pass gradient only strictly inside the unclamped region;
//! dropout is inverted (survivors scaled by `1/(1-p)`).

mod check;
mod conv;
mod tape;
mod tensor;

use thiserror::Error;

pub use check::{grad_check, rel_error, GradCheckReport, REL_ERROR_FLOOR};
pub(crate) use tape::softmax_probs;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

pub type Result<T, E = AutodiffError> = std::result::Result<T, E>;
