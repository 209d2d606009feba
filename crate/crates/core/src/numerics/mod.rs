//! Dense tensors, reverse-mode gradients, parameter storage and checkpoints.

mod checkpoint;
mod gradcheck;
mod param;
mod tape;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, StoredTensor, CHECKPOINT_FORMAT};
pub use gradcheck::{grad_check, GradCheckReport, GRAD_CHECK_FLOOR};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{sigmoid, softmax_in_place, softplus, Gradients, Tape, Var};
pub use tensor::{Tensor, MAX_AXES};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("index {index} out of bounds ({bound}) in {op}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("width {width} is not divisible into {heads} heads")]
    Heads { width: usize, heads: usize },
    #[error("tensor has {0} axes; at most 4 are supported")]
    TooManyAxes(usize),
    #[error("shape {shape:?} does not match {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward needs a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
