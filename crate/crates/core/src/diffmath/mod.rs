//! Dense tensors, reverse-mode differentiation and the SGD optimiser.

mod gradcheck;
mod graph;
mod optim;
mod tensor;

pub use gradcheck::{finite_difference_gradient, max_relative_error};
pub use graph::{Gradients, Graph, Var};
pub use optim::Sgd;
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op} (node {node}): {detail}")]
    ShapeMismatch {
        op: &'static str,
        node: usize,
        detail: String,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("invalid shape {0:?}: dimensions must be positive")]
    InvalidShape(Vec<usize>),
    #[error("backward needs a one-element root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("non-finite value produced by {op} (node {node})")]
    NonFinite { op: &'static str, node: usize },
}
