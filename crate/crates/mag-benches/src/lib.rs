//! Shared fixtures for the criterion benchmarks.

use mag_core::model::{AttentionMode, Model, ModelConfig};

pub fn bench_model_cfg() -> ModelConfig {
    let mut cfg = ModelConfig::tiny(2, 64, 4, 4, 3);
    cfg.frame_h = 24;
    cfg.frame_w = 24;
    cfg.attention_mode = AttentionMode::BlockCausal;
    cfg
}

pub fn bench_models() -> (Model, Model) {
    let cfg = bench_model_cfg();
    (
        Model::new(cfg.clone(), 1).expect("generator"),
        Model::new(cfg, 2).expect("memory"),
    )
}
