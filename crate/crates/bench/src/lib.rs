//! Fixtures shared by the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tba_core::dataset::{generate_split, DataConfig, Example, SplitKind, SplitSizes};
use tba_core::language::Vocabulary;
use tba_core::model::{Batch, ModelConfig, Network, Variant, Weighting};
use tba_core::ParamStore;

/// `n` split-A training examples at the micro grid size.
pub fn examples(n: usize, seed: u64) -> Vec<Example> {
    let cfg = DataConfig {
        sizes: SplitSizes {
            n_train: n,
            n_dev: 1,
            n_test: 1,
        },
        ..DataConfig::micro()
    };
    generate_split(SplitKind::Random, &cfg, seed, 1)
        .expect("generation succeeds")
        .train
}

pub fn batch(examples: &[Example]) -> Batch {
    let refs: Vec<&Example> = examples.iter().collect();
    Batch::new(&refs, &Vocabulary::commands()).expect("valid batch")
}

/// A freshly initialised micro-profile network.
pub fn micro_network(variant: Variant, seed: u64) -> (Network, ParamStore) {
    let weighting = if variant.predicts_first() {
        Weighting::On
    } else {
        Weighting::Ablated
    };
    let cfg = ModelConfig::micro(4, Vocabulary::commands().len(), variant, weighting);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Network::new(cfg, &mut rng).expect("valid config")
}
