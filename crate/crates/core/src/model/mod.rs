//! Command/world encoders, target-prediction heads and the attention decoder.

mod attention;
mod batch;
mod config;
mod network;

pub use attention::{additive_attention, dot_attention};
pub use batch::{
    action_class, class_action, Batch, DECODER_INPUTS, EOS_CLASS, OUTPUT_CLASSES, START_INPUT,
};
pub use config::{Dropout, ModelConfig, Profile, Variant, Weighting};
pub use network::{
    step_cap, BoundParams, Decode, EncodedInputs, ForwardOutput, Network, StepOutput, TargetScores,
};

use thiserror::Error;

use crate::diffcore::DiffError;
use crate::language::LanguageError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("bad batch: {0}")]
    Batch(String),
    #[error("target scores requested before decoding")]
    NotDecoded,
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Language(#[from] LanguageError),
}

#[cfg(test)]
mod tests;
