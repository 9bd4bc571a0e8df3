//! Dense float32 tensors with tape-based reverse-mode differentiation.

mod adam;
mod checkpoint;
mod kernels;
mod linalg;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use kernels::{gemm, layer_norm_rows, softmax_in_place};
pub use linalg::{cholesky_solve, gram};
pub use tape::{Gradients, ParamKey, Tape, Var};
pub use tensor::{ParamStore, Tensor};

use thiserror::Error;

pub const LAYER_NORM_EPS: f32 = 1e-5;

#[derive(Debug, Error, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward was already run on this tape")]
    BackwardTwice,
    #[error("index {index} out of range for {op} with {len} rows")]
    Index { op: &'static str, index: usize, len: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> NumericsError {
    NumericsError::Shape { op, detail: detail.into() }
}
