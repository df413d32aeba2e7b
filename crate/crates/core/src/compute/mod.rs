//! Differentiable computation: tensors, a tape-based graph with reverse-mode
//! gradients, grouped parameter storage and finite-difference checking.

mod gradcheck;
mod graph;
mod params;
mod tensor;

use thiserror::Error;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use graph::{Graph, NodeGrads, Var, MASK_NEG};
pub use params::{Grads, Param, ParamGroup, ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum ComputeError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    Axis { op: &'static str, axis: usize, rank: usize },
    #[error("{op}: index {index} out of range for length {len}")]
    Index { op: &'static str, index: usize, len: usize },
    #[error("{0}: needs at least one input")]
    Empty(&'static str),
    #[error("shape {shape:?} does not hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("gradient check saw unfrozen random noise; pass the noise as an explicit input")]
    UnfrozenNoise,
    #[error("duplicate parameter name {0:?}")]
    DuplicateParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ComputeError {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        ComputeError::Shape { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
    }
}
