//! Dense f64 tensors plus tape-based reverse-mode differentiation.
//!
//! The tape is rebuilt per evaluation (define-by-run): every operation
//! computes its forward value immediately, so host code can branch on
//! intermediate values (e.g. spline bin searches) while the tape records
//! enough to replay the chain rule in reverse. Everything is double
//! precision; the densities this crate differentiates span ranges that
//! single precision does not cover.

mod check;
mod params;
mod tape;
mod tensor;

pub use check::{evaluate_with_gradient, finite_difference_check, gradient_discrepancy};
pub use params::{ParameterLayout, ParameterVector, Segment};
pub use tape::{log_sum_exp, sigmoid, softplus, Gradients, Tape, Var};
pub use tensor::Tensor;

/// Errors raised while building or differentiating a tape.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?} for {op}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("non-finite value produced by primitive {index} ({op})")]
    NonFinite { index: usize, op: &'static str },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("expected scalar output, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("index {index} out of bounds for {op} on shape {shape:?}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        shape: Vec<usize>,
    },
    #[error("segment {name:?} not found in parameter vector")]
    UnknownSegment { name: String },
    #[error("segments overlap or leave gaps: {reason}")]
    BadSegments { reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;
