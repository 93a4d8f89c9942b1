#![allow(dead_code)]

use fedllm_core::model::encode;
use fedllm_core::trainers::pretrain;
use fedllm_core::{MiniLM, ModelConfig, OptimizerConfig};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn tiny(d: usize, layers: usize, seed: u64) -> ModelConfig {
    ModelConfig { d_model: d, n_heads: 2, n_layers: layers, d_ff: 2 * d, max_seq_len: 48, seed, ..ModelConfig::default() }
}

/// Short templated product lines; `topic` picks the vocabulary.
pub fn corpus(n: usize, topic: usize, seed: u64) -> Vec<Vec<u32>> {
    const COLORS: [&[&str]; 2] = [&["red", "blue", "green"], &["black", "white", "gray"]];
    const ITEMS: [&[&str]; 2] = [&["shirt", "scarf", "sock"], &["lamp", "desk", "chair"]];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let c = COLORS[topic].choose(&mut rng).unwrap();
            let i = ITEMS[topic].choose(&mut rng).unwrap();
            encode(format!("a {c} {i}. the {i} is {c}.").as_bytes())
        })
        .collect()
}

pub fn sgd(lr: f64) -> OptimizerConfig {
    OptimizerConfig { lr, momentum: Some(0.9), clip_norm: Some(1.0) }
}

/// A base model that has seen the other topic, so adapters have something to build on.
pub fn pretrained(cfg: ModelConfig) -> MiniLM {
    let mut m = MiniLM::new(cfg).unwrap();
    pretrain(&mut m, &corpus(64, 1, 5), 4, 8, &sgd(0.05), 1).unwrap();
    m
}
