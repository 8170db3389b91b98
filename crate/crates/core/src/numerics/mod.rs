//! Dense tensors, a reverse-mode tape, parameters, optimizer and seeded randomness.

mod graph;
mod gradcheck;
mod optim;
mod params;
mod rng;
mod tensor;

pub use gradcheck::{finite_diff_grad, relative_error};
pub use graph::{Activation, Gradients, Graph, NodeId, PrimitiveArgs, PrimitiveKind};
pub(crate) use graph::{stable_sigmoid, stable_softplus};
pub use optim::{Adam, AdamConfig};
pub use params::{Dense, Mlp, ParamId, ParamStore};
pub use rng::{gaussian_draw, seeded_rng, uniform_draw, Rng};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("shape {shape:?} has a zero extent")]
    InvalidShape { shape: Vec<usize> },
    #[error("non-finite output at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("loss must be scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: axis {axis} invalid for shape {shape:?}")]
    BadAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: index out of range for shape {shape:?}")]
    IndexOutOfRange { op: &'static str, shape: Vec<usize> },
    #[error("{op}: expected {expected} inputs, got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: no inputs")]
    EmptyInput { op: &'static str },
    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
}
