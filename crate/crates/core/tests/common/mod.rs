#![allow(dead_code)]

use disco::config::TrainConfig;
use disco::data::{synth_generate, SynthData, SynthSpec};
use disco::pipeline::{prepare, Prepared};
use disco::semkb::{build_kb, KnowledgeBase, StubEncoder};

/// A small synthetic dataset that trains in well under a second per epoch.
pub fn small_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        n_users: 60,
        n_items: 40,
        n_categories: 4,
        n_topics: 4,
        min_events: 10,
        max_events: 16,
        seed,
        ..SynthSpec::default()
    }
}

pub fn stub_kb(data: &SynthData, dim: usize) -> KnowledgeBase {
    build_kb(data.catalog.items(), &StubEncoder::new(dim, 0), "item").unwrap()
}

/// Config sized for quick tests.
pub fn small_config() -> TrainConfig {
    let mut cfg = TrainConfig {
        d: 8,
        k: 10,
        batch_size: 32,
        mlp_hidden: vec![16],
        reducer_hidden: vec![16],
        attention_hidden: 8,
        estimator_hidden: 8,
        item_fields: vec!["item_id".into(), "category".into()],
        ..TrainConfig::default()
    };
    cfg.validate().unwrap();
    cfg.seed = 3;
    cfg
}

pub fn small_prepared(cfg: &TrainConfig, seed: u64) -> Prepared {
    let data = synth_generate(&small_spec(seed)).unwrap();
    let kb = stub_kb(&data, 32);
    prepare(&data.log, data.catalog.clone(), kb, cfg).unwrap()
}
