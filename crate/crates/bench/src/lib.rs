//! Shared fixtures for the criterion benchmarks.

use coview_core::encoder::EncoderConfig;
use coview_core::fusion::FusionConfig;
use coview_core::model::{prepare_all, Model, ModelConfig, PreparedScenario};
use coview_core::synthgen::{generate, GenConfig};

/// Synthetic scenarios with the horizons used in the experiments.
pub fn scenarios(n: usize, history_len: usize, future_len: usize) -> Vec<PreparedScenario> {
    let cfg = GenConfig {
        n_scenarios: n,
        history_len,
        future_len,
        seed: 42,
        ..Default::default()
    };
    let raw = generate(&cfg).expect("default generator config is valid");
    prepare_all(&raw, 50.0).expect("generated scenarios are well formed")
}

pub fn model(d_h: usize, heads: usize, history_len: usize, future_len: usize) -> Model {
    Model::new(ModelConfig {
        encoder: EncoderConfig {
            d_h,
            n_heads: heads,
            ..Default::default()
        },
        fusion: FusionConfig {
            n_heads: heads,
            ..Default::default()
        },
        history_len,
        future_len,
        ..Default::default()
    })
    .expect("benchmark model config is valid")
}
