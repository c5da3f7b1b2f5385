//! Reverse-mode automatic differentiation over small dense f64 tensors.

mod checkpoint;
mod gradcheck;
mod graph;
mod nn;
mod params;
mod tensor;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointManifest, TensorEntry, MANIFEST_FILE, PARAMS_FILE,
};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use nn::{linear, lstm_cell, LstmParams, LstmState, LstmVars};
pub use params::{Init, ParamId, ParamStore};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("duplicate parameter name {0:?}")]
    DuplicateParam(String),
    #[error("{0}")]
    Invalid(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}

impl DiffError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        DiffError::Invalid(msg.into())
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        DiffError::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
