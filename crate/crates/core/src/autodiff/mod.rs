//! Dense tensors with reverse-mode differentiation.
//!
//! The [`Tape`] records every primitive applied to its [`Var`]s and replays
//! them backwards to produce gradients. [`grad_check`] compares those
//! gradients against central finite differences, and [`checkpoint`] stores
//! named parameter tensors on disk.

pub mod checkpoint;
mod gradcheck;
mod tape;
mod tensor;

use thiserror::Error;

pub use gradcheck::{grad_check, GradCheckReport, DEFAULT_STEP};
pub use tape::{Gradients, Primitive, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("tensor extents must be positive, got {0:?}")]
    EmptyExtent(Vec<usize>),
    #[error("shape {shape:?} does not match {len} data values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("rows have different lengths")]
    Ragged,
    #[error("expected a matrix, got shape {0:?}")]
    NotMatrix(Vec<usize>),
    #[error("{0} needs at least one input")]
    EmptyInput(&'static str),
    #[error("expected {expected} inputs, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("index {index} out of range for extent {len}")]
    Index { index: usize, len: usize },
    #[error("window width {width} does not fit sequence of length {len}")]
    Window { width: usize, len: usize },
    #[error("backward needs a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, left: &Tensor, right: &Tensor) -> Self {
        Self::Shape {
            op,
            left: left.shape().to_vec(),
            right: right.shape().to_vec(),
        }
    }
}
