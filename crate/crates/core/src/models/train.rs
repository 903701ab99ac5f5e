use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Batch, Forward, ModelConfig, ModelError, RecModel};
use crate::data::{sample_train_negatives, TrainPair, TrainSet};
use crate::seed;
use crate::tensor::{Adagrad, Gradients};
use crate::{Graph, NodeId, TensorError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Sampled negatives per positive each epoch; 0 trains on the labelled
    /// pairs as given.
    pub n_neg: u32,
    pub l2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 4096,
            learning_rate: Adagrad::DEFAULT_LR,
            n_neg: 1,
            l2: 1e-6,
        }
    }
}

/// Named extra loss terms reported in the training log.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Bda,
    Distill,
    Consistency,
}

/// Extra terms an [`Objective`] adds to one batch's graph.
#[derive(Debug, Clone, Default)]
pub struct ExtraTerms {
    /// Weighted sum added to the recommendation loss.
    pub total: Option<NodeId>,
    /// Unweighted terms, for logging.
    pub parts: Vec<(Component, NodeId)>,
}

/// Hook that extends the recommendation loss of [`fit`].
pub trait Objective {
    fn extra_terms(
        &mut self,
        g: &mut Graph,
        student: &RecModel,
        fwd: &Forward,
        batch: &Batch,
    ) -> Result<ExtraTerms, TensorError>;

    /// Per-row weights for the recommendation BCE.
    fn sample_weights(&self, _batch: &Batch) -> Option<Arc<[f64]>> {
        None
    }

    /// Called after the student step with the batch's gradients.
    fn update(&mut self, _grads: &Gradients) -> Result<(), TensorError> {
        Ok(())
    }
}

/// Plain recommendation loss.
pub struct NoExtra;

impl Objective for NoExtra {
    fn extra_terms(
        &mut self,
        _g: &mut Graph,
        _student: &RecModel,
        _fwd: &Forward,
        _batch: &Batch,
    ) -> Result<ExtraTerms, TensorError> {
        Ok(ExtraTerms::default())
    }
}

/// Per-epoch mean losses and wall time.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub rec: f64,
    pub bda: f64,
    pub distill: f64,
    pub consistency: f64,
    pub wall_seconds: f64,
}

impl EpochLog {
    pub fn total(&self, lambda_bda: f64, lambda_fda: f64) -> f64 {
        self.rec + lambda_bda * self.bda + lambda_fda * (self.distill + self.consistency)
    }
}

fn epoch_pairs(
    train: &TrainSet,
    cfg: &TrainConfig,
    master: u64,
    epoch: usize,
) -> Result<Vec<TrainPair>, ModelError> {
    let mut pairs = if cfg.n_neg == 0 {
        train.pairs.clone()
    } else {
        let s = seed::derive(master, &format!("negatives/{epoch}"));
        sample_train_negatives(train, cfg.n_neg, s)?
    };
    pairs.shuffle(&mut seed::rng(master, &format!("shuffle/{epoch}")));
    Ok(pairs)
}

/// Trains `model` in place with Adagrad on the recommendation loss plus the
/// objective's extra terms. Negatives and batch order derive from `master`.
pub fn fit(
    model: &mut RecModel,
    train: &TrainSet,
    cfg: &TrainConfig,
    master: u64,
    objective: &mut dyn Objective,
) -> Result<Vec<EpochLog>, ModelError> {
    if cfg.batch_size == 0 {
        return Err(ModelError::Invalid("batch_size must be positive".into()));
    }
    if train.pairs.is_empty() {
        return Err(ModelError::Invalid("no training pairs".into()));
    }
    let mut opt = Adagrad::new(&model.store, cfg.learning_rate);
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let pairs = epoch_pairs(train, cfg, master, epoch)?;
        let mut log = EpochLog {
            epoch: epoch + 1,
            ..EpochLog::default()
        };
        for (step, chunk) in pairs.chunks(cfg.batch_size).enumerate() {
            let diverged = |source| match source {
                TensorError::NonFinite { .. } => ModelError::Diverged {
                    epoch: epoch + 1,
                    step,
                    source,
                },
                other => ModelError::Tensor(other),
            };
            let batch = Batch::from_pairs(train, chunk);
            let mut g = Graph::new();
            let terms = (|| {
                let fwd = model.forward(&mut g, &batch)?;
                let weights = objective.sample_weights(&batch);
                let rec = model.rec_loss(&mut g, &fwd, &batch, weights, cfg.l2)?;
                let extra = objective.extra_terms(&mut g, model, &fwd, &batch)?;
                let loss = match extra.total {
                    Some(t) => g.add(rec, t)?,
                    None => rec,
                };
                Ok((rec, extra.parts, loss))
            })()
            .map_err(diverged)?;
            let (rec, parts, loss) = terms;
            let grads = g.backward(loss).map_err(diverged)?;
            let student_grads = grads.for_store(&model.store);
            opt.step(&mut model.store, &student_grads).map_err(diverged)?;
            objective.update(&grads).map_err(diverged)?;
            let w = chunk.len() as f64 / pairs.len() as f64;
            log.rec += w * g.value(rec).item();
            for (c, node) in parts {
                let v = w * g.value(node).item();
                match c {
                    Component::Bda => log.bda += v,
                    Component::Distill => log.distill += v,
                    Component::Consistency => log.consistency += v,
                }
            }
        }
        log.wall_seconds = start.elapsed().as_secs_f64();
        logs.push(log);
    }
    Ok(logs)
}

/// Initialises a model from `seed::derive(master, "init")` and fits it on the
/// recommendation loss alone.
pub fn train_base(
    config: ModelConfig,
    train: &TrainSet,
    cfg: &TrainConfig,
    master: u64,
) -> Result<(RecModel, Vec<EpochLog>), ModelError> {
    let mut model = RecModel::new(config, seed::derive(master, "init"))?;
    let logs = fit(&mut model, train, cfg, master, &mut NoExtra)?;
    Ok((model, logs))
}
