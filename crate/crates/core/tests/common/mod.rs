#![allow(dead_code)]

use std::path::{Path, PathBuf};

use retro_core::model::{Model, ModelConfig, Sample};
use retro_core::reaction::{
    build_vocab, extract_labels, load_corpus, LeavingGroupVocab, ReactionRecord, RetroLabels, Split,
    DEFAULT_MAX_H_CHANGE,
};

pub fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

pub fn corpus(name: &str) -> Vec<ReactionRecord> {
    let load = load_corpus(&data(name), Split::Train).unwrap();
    assert!(load.errors.is_empty());
    load.records
}

pub fn labelled(records: &[ReactionRecord]) -> Vec<(ReactionRecord, RetroLabels)> {
    records
        .iter()
        .map(|r| (r.clone(), extract_labels(r, DEFAULT_MAX_H_CHANGE).unwrap()))
        .collect()
}

pub fn mini_vocab() -> LeavingGroupVocab {
    build_vocab(&corpus("mini_corpus.csv"), DEFAULT_MAX_H_CHANGE).0
}

pub fn small_config() -> ModelConfig {
    ModelConfig {
        d: 16,
        d_k: 4,
        n_head: 4,
        layers: 2,
        max_hop: 2,
        ..ModelConfig::default()
    }
}

pub fn samples(model: &Model, pairs: &[(ReactionRecord, RetroLabels)]) -> Vec<Sample> {
    pairs
        .iter()
        .map(|(r, l)| Sample::new(model, r, l, false).unwrap())
        .collect()
}

/// Up to `count` mini-corpus samples whose products have at most `max_atoms`
/// heavy atoms.
pub fn small_samples(model: &Model, count: usize, max_atoms: usize) -> Vec<Sample> {
    let pairs: Vec<_> = labelled(&corpus("mini_corpus.csv"))
        .into_iter()
        .filter(|(r, _)| r.product.len() <= max_atoms)
        .take(count)
        .collect();
    samples(model, &pairs)
}

/// A d=32 model trained for `steps` steps on the whole mini-corpus.
pub fn trained_mini(steps: usize) -> Model {
    trained_on("mini_corpus.csv", steps)
}

/// A d=32 model trained for `steps` steps on every record of `name`, with
/// that corpus's own leaving-group vocabulary.
pub fn trained_on(name: &str, steps: usize) -> Model {
    use retro_core::trainer::{TrainConfig, Trainer};
    let pairs = labelled(&corpus(name));
    let config = ModelConfig {
        d: 32,
        d_k: 8,
        n_head: 4,
        layers: 2,
        max_hop: 2,
        ..ModelConfig::default()
    };
    let vocab = build_vocab(&corpus(name), DEFAULT_MAX_H_CHANGE).0;
    let model = Model::new(config, vocab).unwrap();
    let samples = samples(&model, &pairs);
    let mut trainer = Trainer::new(
        model,
        TrainConfig {
            epochs: usize::MAX,
            ..TrainConfig::default()
        },
    );
    trainer.fit(&samples, steps, None, |_, _| false).unwrap();
    trainer.model
}
