//! Shared fixtures for the benchmarks.

use causald_core::data::TrainSet;
use causald_core::distill::{train_teachers, TeacherEnsemble};
use causald_core::models::{Arch, Batch, ModelConfig, TrainConfig};
use causald_core::synth::{generate, ScmConfig, ScmDataset};

pub fn dataset(n_users: usize, n_items: usize) -> ScmDataset {
    let mut cfg = ScmConfig::new(n_users, n_items);
    cfg.seed = 11;
    generate(&cfg).expect("valid synthetic config")
}

pub fn train_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 256,
        learning_rate: 0.05,
        n_neg: 0,
        l2: 1e-6,
    }
}

pub fn model_config(arch: Arch, train: &TrainSet) -> ModelConfig {
    ModelConfig::new(arch, train.n_users, train.n_items)
}

/// `k` teachers over contiguous user blocks.
pub fn ensemble(arch: Arch, train: &TrainSet, k: usize) -> TeacherEnsemble {
    let groups: Vec<usize> = (0..train.n_users).map(|u| u * k / train.n_users).collect();
    let mut sizes = vec![0; k];
    for &g in &groups {
        sizes[g] += 1;
    }
    let assignment = causald_core::data::GroupAssignment {
        attribute: "block".into(),
        groups,
        sizes,
    };
    let subsets = causald_core::data::split_non_iid(train, &assignment);
    train_teachers(&subsets, "block", &model_config(arch, train), &train_config(1), 5)
        .expect("teachers train")
}

/// The first `n` training pairs as a batch.
pub fn batch(train: &TrainSet, n: usize) -> Batch {
    Batch::from_pairs(train, &train.pairs[..n.min(train.pairs.len())])
}
