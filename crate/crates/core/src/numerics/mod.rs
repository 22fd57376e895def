//! Dense `f64` tensors, a reverse-mode tape, parameters and the Adam optimizer.

mod graph;
pub mod gradcheck;
mod optim;
mod param;
mod tensor;

pub use graph::{AttnMask, GradientSet, Graph, Var, BLOCKED};
pub use optim::{Adam, AdamConfig};
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NumericsError {
    #[error("{context}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("learning rate must be positive, got {0}")]
    InvalidLearningRate(f64),
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
}

#[cfg(test)]
mod tests;
