//! Fixtures shared by the benchmarks.

use tcpool::synth::{generate_corpus, CorpusSpec, SyntheticScene};
use tcpool::trainer::{TrainConfig, Trainer, TrainingSet};

/// `n` training scenes from a fixed seed.
pub fn scenes(n: usize) -> Vec<SyntheticScene> {
    generate_corpus(&CorpusSpec {
        n_train: n,
        n_test: 0,
        objects_per_scene: 3,
        seed: 11,
    })
    .expect("corpus")
    .train
}

pub fn training_set(n: usize) -> TrainingSet {
    TrainingSet::from_scenes(&scenes(n)).expect("training set")
}

/// A freshly initialized trainer with the reference settings.
pub fn trainer(data: &TrainingSet) -> Trainer<'_> {
    Trainer::new(data, TrainConfig::reference()).expect("trainer")
}
