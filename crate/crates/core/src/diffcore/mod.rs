//! Reverse-mode automatic differentiation over dense `f64` tensors, plus
//! the Adam optimizer, global-norm gradient clipping and a finite-difference
//! gradient checker.

mod check;
mod optim;
mod tape;
mod tensor;

pub use check::{gradient_check, GradCheck, REL_FLOOR};
pub use optim::{clip_global_norm, global_norm, AdamConfig, AdamState};
pub use tape::{Gradients, NodeId, Op, Tape};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiffError {
    #[error("{op}: incompatible input shapes {shapes:?}")]
    ShapeMismatch { op: &'static str, shapes: Vec<Vec<usize>> },
    #[error("{op}: wrong number of inputs ({got})")]
    Arity { op: &'static str, got: usize },
    #[error("shape {shape:?} does not hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("slice {start}..{end} out of range for shape {shape:?}")]
    BadSlice {
        shape: Vec<usize>,
        start: usize,
        end: usize,
    },
    #[error("{op}: index {index} out of range for {len} rows")]
    BadIndex { op: &'static str, index: usize, len: usize },
    #[error("node {0} is not on the tape")]
    UnknownNode(usize),
    #[error("loss must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{params} parameters, {grads} gradients and {moments} moment slots do not line up")]
    ParamCount {
        params: usize,
        grads: usize,
        moments: usize,
    },
}
