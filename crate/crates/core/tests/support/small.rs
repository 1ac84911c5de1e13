//! A 16^3 world small enough for integration tests to train in seconds.

use volmoe::encoders::EncoderConfig;
use volmoe::model::MoeModel;
use volmoe::synthdata::{build_corpora, CategorySpec, Corpus, CorpusConfig, IntensityProfile, ShapeFamily};

pub fn encoder() -> EncoderConfig {
    EncoderConfig {
        volume_side: 16,
        ..Default::default()
    }
}

pub fn corpus_config() -> CorpusConfig {
    let bright = IntensityProfile::new(1.0, 0.0, 0.3);
    CorpusConfig {
        volume_side: 16,
        train_per_category: 8,
        heldout_per_category: 3,
        general: vec![
            CategorySpec::new("g_ball", ShapeFamily::Ball, (3.0, 5.0), bright),
            CategorySpec::new("g_box", ShapeFamily::Box, (3.0, 5.0), bright),
        ],
        expert: vec![
            CategorySpec::new("e_ball", ShapeFamily::Ball, (3.0, 5.0), IntensityProfile::new(-1.0, 1.0, 0.3)),
            CategorySpec::new("e_box", ShapeFamily::Box, (3.0, 5.0), IntensityProfile::new(0.0, 2.0, 0.3)),
        ],
    }
}

pub fn corpus(seed: u64) -> Corpus {
    build_corpora(&corpus_config(), seed).unwrap()
}

/// Random model with both experts cloned from the general decoder and a
/// fresh gate.
pub fn model_with_experts(seed: u64) -> MoeModel {
    let mut m = MoeModel::new(encoder(), seed).unwrap();
    m.bank.clone_expert("e_ball").unwrap();
    m.bank.clone_expert("e_box").unwrap();
    m.init_gate(seed + 1).unwrap();
    m
}
