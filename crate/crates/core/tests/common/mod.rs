#![allow(dead_code)]

use dre_core::corpus::{Corpus, RelationSplit};
use dre_core::model::{Model, ModelKind};
use dre_core::reformulate::build_training_set;
use dre_core::synthetic::{generate_corpus, SynthSpec};
use dre_core::trainer::{binary_examples, init_model, Example, TrainConfig};

/// The acceptance layout shrunk to a few dialogues per relation.
pub fn small_synth(seed: u64, per_relation: usize) -> (Corpus, RelationSplit) {
    let spec = SynthSpec {
        dialogues_per_relation: per_relation,
        ..SynthSpec::acceptance(seed)
    };
    let s = generate_corpus(&spec).expect("valid spec");
    (s.corpus, s.split)
}

/// Tiny-backend config small enough for finite-difference probes.
pub fn small_config(seed: u64) -> TrainConfig {
    let mut c = TrainConfig::tiny();
    c.seed = seed;
    c.tiny.hidden_dim = 16;
    c.tiny.intermediate_dim = 32;
    c.tiny.num_layers = 2;
    c
}

pub fn small_model(seed: u64) -> (Model, Corpus, RelationSplit, Vec<Example>) {
    let (corpus, split) = small_synth(seed, 2);
    let config = small_config(seed);
    let model = init_model(&corpus, &split, &config, ModelKind::Binary).expect("model");
    let set = build_training_set(&corpus, &split, 3, seed).expect("training set");
    let examples = binary_examples(&model, &corpus, &set).expect("examples");
    (model, corpus, split, examples)
}
