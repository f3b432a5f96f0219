//! Shared fixtures for the pipeline benchmarks.

use gardiff_core::codec;
use gardiff_core::corpus::{make_sample, CorpusConfig};
use gardiff_core::net::ModelConfig;
use gardiff_core::train::{prepare_item, PreparedItem};

/// A deterministic prepared sample at the default model dims.
pub fn fixture_item(seed: u64) -> (ModelConfig, PreparedItem<f32>) {
    let model = ModelConfig::default();
    let cfg = CorpusConfig {
        train_count: 1,
        test_count: 1,
        base_seed: seed,
        ..CorpusConfig::default()
    };
    let sample = make_sample(&cfg, 0).expect("fixture sample");
    let item = prepare_item(&sample, &model).expect("prepared item");
    (model, item)
}

/// Latent dims of the default config.
pub fn latent_shape() -> Vec<usize> {
    let m = ModelConfig::default();
    let (c, h, w) = codec::latent_dims(m.person_h, m.person_w);
    vec![c, h, w]
}
