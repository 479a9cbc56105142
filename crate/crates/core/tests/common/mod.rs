#![allow(dead_code)]

pub mod oracles;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rulecap::model::{ModelConfig, ModelInput, TrainExample};

/// Small enough for finite-difference checks (< 2,000 parameters).
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_enc_layers: 2,
        n_dec_layers: 1,
        ffn_dim: 8,
        vocab_size: 12,
        inject_layers: vec![2],
        prefix_len: 2,
        d_img: 4,
        d_rule_txt: 6,
        max_src_len: 10,
        max_tgt_len: 6,
        ..ModelConfig::default()
    }
}

pub fn random_input(rng: &mut ChaCha8Rng, cfg: &ModelConfig, article_len: usize) -> ModelInput {
    let words = [
        "performing",
        "Agent",
        "Ms. Micucci",
        "Stage",
        "theater",
        "speaking",
        "Place",
        "Boston",
    ];
    let n = rng.random_range(1..4);
    let text: Vec<&str> = (0..n)
        .map(|_| words[rng.random_range(0..words.len())])
        .collect();
    ModelInput {
        rule_texts: vec![text.join(" | ")],
        image_feature: (0..cfg.d_img)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
        article_ids: (0..article_len)
            .map(|_| rng.random_range(4..cfg.vocab_size))
            .collect(),
    }
}

pub fn random_example(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> TrainExample {
    let alen = rng.random_range(1..cfg.max_src_len);
    let tlen = rng.random_range(1..=cfg.max_tgt_len);
    TrainExample {
        input: random_input(rng, cfg, alen),
        target: (0..tlen)
            .map(|_| rng.random_range(4..cfg.vocab_size))
            .collect(),
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
