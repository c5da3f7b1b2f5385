use crate::dataset::Example;
use crate::gridworld::{encode_world, CELL_CHANNELS};
use crate::language::{Vocabulary, PAD_INDEX};
use crate::planner::Action;

use super::ModelError;

/// Decoder output classes: the three actions followed by end-of-sequence.
pub const OUTPUT_CLASSES: usize = 4;
pub const EOS_CLASS: usize = 3;
/// Decoder input index of the start symbol (after the three actions).
pub const START_INPUT: usize = 3;
pub const DECODER_INPUTS: usize = 4;

pub fn action_class(a: Action) -> usize {
    a.index()
}

pub fn class_action(c: usize) -> Option<Action> {
    Action::ALL.get(c).copied()
}

/// Padded, tensor-ready view of a list of examples.
#[derive(Debug, Clone)]
pub struct Batch {
    pub size: usize,
    pub d: usize,
    /// `tokens[t][b]`, padded with the pad index past each command's length.
    pub tokens: Vec<Vec<usize>>,
    pub command_lengths: Vec<usize>,
    /// Channels-last `[B, d, d, 16]` grid encoding.
    pub grids: Vec<f64>,
    pub targets: Vec<usize>,
    /// Gold output classes per example, ending with [`EOS_CLASS`].
    pub gold: Vec<Vec<usize>>,
}

impl Batch {
    pub fn new(examples: &[&Example], vocab: &Vocabulary) -> Result<Self, ModelError> {
        let first = examples.first().ok_or(ModelError::EmptyBatch)?;
        let d = first.world.d();
        let size = examples.len();
        let mut ids = Vec::with_capacity(size);
        for ex in examples {
            if ex.world.d() != d {
                return Err(ModelError::Batch(format!(
                    "mixed grid sizes {d} and {}",
                    ex.world.d()
                )));
            }
            let t = ex.token_ids(vocab)?;
            if t.is_empty() {
                return Err(ModelError::Batch("empty command".into()));
            }
            if ex.target >= d * d {
                return Err(ModelError::Batch(format!(
                    "target {} outside a {d}x{d} grid",
                    ex.target
                )));
            }
            ids.push(t);
        }
        let max_len = ids.iter().map(Vec::len).max().unwrap_or(0);
        let tokens = (0..max_len)
            .map(|t| {
                ids.iter()
                    .map(|s| s.get(t).copied().unwrap_or(PAD_INDEX))
                    .collect()
            })
            .collect();
        let mut grids = Vec::with_capacity(size * d * d * CELL_CHANNELS);
        for ex in examples {
            grids.extend_from_slice(encode_world(&ex.world).data());
        }
        Ok(Self {
            size,
            d,
            tokens,
            command_lengths: ids.iter().map(Vec::len).collect(),
            grids,
            targets: examples.iter().map(|e| e.target).collect(),
            gold: examples
                .iter()
                .map(|e| {
                    e.actions
                        .iter()
                        .map(|&a| action_class(a))
                        .chain([EOS_CLASS])
                        .collect()
                })
                .collect(),
        })
    }

    pub fn command_len(&self) -> usize {
        self.tokens.len()
    }

    /// Longest gold output including EOS.
    pub fn max_gold_len(&self) -> usize {
        self.gold.iter().map(Vec::len).max().unwrap_or(0)
    }
}
