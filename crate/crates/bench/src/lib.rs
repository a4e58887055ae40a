//! Shared fixtures for the criterion benchmarks.

use pcw_core::model::{Model, ModelConfig, PositionalKind};

/// GPT-2-small-shaped model scaled down so a bench iteration stays in the
/// millisecond range: 4 layers, d=128, N=512.
pub fn bench_model(kind: PositionalKind) -> Model {
    let mut cfg = ModelConfig::tiny(kind);
    cfg.n_layers = 4;
    cfg.d_model = 128;
    cfg.d_ff = 512;
    cfg.vocab_size = 512;
    cfg.max_positions = 512;
    Model::random(cfg, 0, 0.02).expect("valid bench config")
}

/// `b` windows of `c` deterministic tokens each.
pub fn windows(b: usize, c: usize, vocab: usize) -> Vec<Vec<u32>> {
    (0..b)
        .map(|w| (0..c).map(|i| ((w * 131 + i * 17) % vocab) as u32).collect())
        .collect()
}

pub fn task(t: usize, vocab: usize) -> Vec<u32> {
    (0..t).map(|i| ((i * 29 + 3) % vocab) as u32).collect()
}
