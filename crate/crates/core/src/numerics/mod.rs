//! Dense `f64` tensors, a define-by-run reverse-mode tape, a counter-based
//! RNG and the AdamW optimizer. Everything above this module is built from
//! these primitives.

mod graph;
mod optim;
mod params;
mod rng;
mod tensor;

pub use graph::{Graph, Var, NORM_EPS};
pub use optim::{adamw_step, AdamW, AdamWConfig, AdamWState};
pub use params::{ParamId, Params};
pub use rng::Rng;
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("invalid shape {0:?}: dimensions must be positive")]
    InvalidShape(Vec<usize>),
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: degenerate vector (norm {norm:e} below {eps:e})", eps = NORM_EPS)]
    DegenerateVector { op: &'static str, norm: f64 },
    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{0}: empty input")]
    Empty(&'static str),
}
