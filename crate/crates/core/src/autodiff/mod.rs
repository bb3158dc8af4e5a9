//! Tape-based reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Gradients can be recorded back onto the tape they were taken from, which
//! is what makes gradient-through-gradient (second-order meta-gradients)
//! possible.

mod kernels;
mod loss;
mod tape;
mod tensor;

pub use loss::{argmax, cross_entropy, cross_entropy_single};
pub use tape::{GradMap, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("value was not recorded on this tape")]
    NotOnTape,
    #[error("output of shape {0:?} needs an explicit seed")]
    NonScalarOutput(Vec<usize>),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
}
