//! Minimal reverse-mode automatic differentiation.
//!
//! The layer set is closed: exactly the operations the naturalness network
//! needs (3x3 convolution, batch norm, ReLU, ceil-mode 2x2 max pooling,
//! dropout, affine maps, a bidirectional LSTM and the MSE objective). Every
//! operation records what its backward pass needs on a [`Graph`] tape.
//! [`gradcheck`] verifies the backward passes with central differences.

mod adam;
pub mod gradcheck;
mod graph;
mod lstm;
mod scalar;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use graph::{BatchStats, Graph, ParamBindings, Var};
pub use scalar::{gemm, Real};
pub use tensor::{ParameterSet, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("channel mismatch: input has {input} channels, weight expects {weight}")]
    ChannelMismatch { input: usize, weight: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("batch norm needs at least 2 values per channel in train mode, got {0}")]
    BatchTooSmall(usize),
    #[error("dropout probability must lie in [0, 1), got {0}")]
    DropoutProbability(f64),
    #[error("sequence length {length} exceeds {max} time steps")]
    SequenceLength { length: usize, max: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("graph already consumed by a previous backward pass")]
    GraphConsumed,
    #[error("loss batch is empty")]
    EmptyBatch,
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateName(String),
    #[error("unknown parameter `{0}`")]
    UnknownName(String),
    #[error("adam step index must be at least 1")]
    StepIndex,
}

/// Train/eval switch for batch norm and dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
