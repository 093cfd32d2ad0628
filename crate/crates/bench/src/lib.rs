//! Shared fixtures for the benchmarks.

use denselora_core::{AdaptedModel, AdapterConfig, AdapterVariant, ModelConfig, Rng, Tensor};

/// The copy-task model used throughout the acceptance runs.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 32,
        n_heads: 4,
        d_ff: 64,
        vocab_size: 16,
        max_seq_len: 16,
        seed: 0,
    }
}

pub fn adapted(variant: AdapterVariant, rank: usize) -> AdaptedModel {
    let mut model = AdaptedModel::build(toy_config()).expect("toy config is valid");
    model
        .attach(variant, "QKVUD".parse().expect("targets"), &AdapterConfig::new(rank), &mut Rng::new(1))
        .expect("attach");
    model
}

pub fn tokens(n: usize, vocab: usize, seed: u64) -> Vec<usize> {
    let mut rng = Rng::new(seed);
    (0..n).map(|_| rng.below(vocab)).collect()
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    Rng::new(seed).uniform_tensor(&[rows, cols], -1.0, 1.0)
}
