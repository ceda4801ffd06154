//! Shared fixtures for the benchmarks.

use tdu_core::data::{generate_synthetic_dataset, SyntheticSpec};
use tdu_core::model::prepare;
use tdu_core::tokenizer::{build_vocab, Vocab};
use tdu_core::{Example, ModelConfig, ModelParams};

pub struct Fixture {
    pub vocab: Vocab,
    pub instructions: Vec<String>,
    pub examples: Vec<Example>,
    pub params: ModelParams<f32>,
}

/// A small synthetic dataset with a freshly initialized model of the given width.
pub fn fixture(hidden: usize, heads: usize) -> Fixture {
    let spec = SyntheticSpec { train_scenes: 40, val_scenes: 0, test_scenes: 0, ..SyntheticSpec::default() };
    let (scenes, split) = generate_synthetic_dataset(&spec).expect("synthetic data");
    let instructions: Vec<String> = scenes
        .iter()
        .flat_map(|s| s.instructions.iter().map(|i| i.text.clone()))
        .collect();
    let vocab = build_vocab(&instructions, 4682).expect("vocab");
    let config = ModelConfig {
        hidden,
        heads,
        vocab_size: vocab.len(),
        feat_dim: spec.feature_dim(),
        ..ModelConfig::default()
    };
    let examples = prepare(&split.train, &vocab, &config).expect("prepare");
    let params = ModelParams::new(config, 0).expect("params");
    Fixture { vocab, instructions, examples, params }
}
