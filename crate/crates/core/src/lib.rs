//! Grounded command-following on a grid world with a target-first auxiliary
//! head: data generation, a small autodiff engine, the seq2seq model, training
//! and evaluation.

pub mod dataset;
pub mod diffcore;
pub mod evalkit;
pub mod experiment;
pub mod gridworld;
pub mod language;
pub mod model;
pub mod planner;
pub mod trainer;

pub use dataset::{DataConfig, Example, GeneratedSplit, Phase, SplitKind};
pub use diffcore::{grad_check, GradCheckReport, Graph, ParamStore, Tensor};
pub use evalkit::{EvalSummary, Report, RunResult};
pub use experiment::{ArmSpec, ExperimentConfig};
pub use gridworld::{AgentPose, Cell, Color, Heading, ObjectSpec, Shape, WorldState};
pub use language::{Command, Vocabulary};
pub use model::{ModelConfig, Network, Profile, Variant, Weighting};
pub use planner::Action;
pub use trainer::{Settings, TrainConfig};
