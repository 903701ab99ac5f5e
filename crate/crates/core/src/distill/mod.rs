//! Causal multi-teacher distillation.
//!
//! Teachers with the student's architecture are trained on user-disjoint
//! subsets. Their encoders sample the mediator; an attention head weighs the
//! samples per instance and a light scorer estimates `P(Y | do(X))` with
//! in-batch samples of `x`. The student is trained on the recommendation
//! loss plus a feature target (pooled teacher mediators) and a label target
//! (the front-door estimate). KD and IPS baselines live in [`baselines`].

pub mod baselines;
mod ensemble;
mod fda;

pub use ensemble::{mediator_samples, train_teachers, EnsembleManifest, TeacherEnsemble};
pub use fda::{
    attention_weights, bda_mediator, fda_label, fda_loss, feature_distill_loss, pooled_feature,
    FdaHead, FdaNodes, FeatureMode, TeacherOutputs,
};

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::TrainSet;
use crate::models::{
    fit, Batch, Component, EpochLog, ExtraTerms, Forward, ModelConfig, ModelError, Objective,
    RecModel, TrainConfig,
};
use crate::seed;
use crate::tensor::{Adagrad, Gradients};
use crate::{Graph, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DistillError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("teacher subset {index} has no training pairs")]
    EmptySubset { index: usize },
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad ensemble manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub teachers: usize,
    pub lambda_bda: f64,
    pub lambda_fda: f64,
    pub mode: FeatureMode,
    pub head_hidden: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            teachers: 4,
            lambda_bda: 1.0,
            lambda_fda: 1.0,
            mode: FeatureMode::Bda,
            head_hidden: 16,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<(), DistillError> {
        if self.teachers == 0 {
            return Err(DistillError::Invalid("need at least one teacher".into()));
        }
        if !(self.lambda_bda >= 0.0 && self.lambda_fda >= 0.0) {
            return Err(DistillError::Invalid("lambda weights must be non-negative".into()));
        }
        if self.head_hidden == 0 {
            return Err(DistillError::Invalid("head_hidden must be positive".into()));
        }
        Ok(())
    }
}

/// The CausalD extra terms, with the head trained alongside the student.
pub struct CausalObjective<'a> {
    pub teachers: &'a TeacherEnsemble,
    pub head: FdaHead,
    pub config: DistillConfig,
    head_opt: Adagrad,
}

impl<'a> CausalObjective<'a> {
    pub fn new(teachers: &'a TeacherEnsemble, head: FdaHead, config: DistillConfig, lr: f64) -> Self {
        let head_opt = Adagrad::new(&head.store, lr);
        CausalObjective {
            teachers,
            head,
            config,
            head_opt,
        }
    }
}

impl Objective for CausalObjective<'_> {
    fn extra_terms(
        &mut self,
        g: &mut Graph,
        _student: &RecModel,
        fwd: &Forward,
        batch: &Batch,
    ) -> Result<ExtraTerms, TensorError> {
        let outs = mediator_samples(self.teachers, batch)?;
        let guide = pooled_feature(&outs.mediators, &self.teachers.pz, self.config.mode);
        let bda = feature_distill_loss(g, &guide, fwd.mediator)?;
        let nodes = self.head.build(g, &outs, &guide, fwd.mediator)?;
        let labels = g.constant(Tensor::column(batch.labels.clone()));
        let (distill, consistency) = fda_loss(g, nodes.o_tilde, fwd.prob, labels)?;
        let fda = g.add(distill, consistency)?;
        let wb = g.scale(bda, self.config.lambda_bda)?;
        let wf = g.scale(fda, self.config.lambda_fda)?;
        let total = g.add(wb, wf)?;
        Ok(ExtraTerms {
            total: Some(total),
            parts: vec![
                (Component::Bda, bda),
                (Component::Distill, distill),
                (Component::Consistency, consistency),
            ],
        })
    }

    fn update(&mut self, grads: &Gradients) -> Result<(), TensorError> {
        let g = grads.for_store(&self.head.store);
        self.head_opt.step(&mut self.head.store, &g)
    }
}

/// Trains a student with the CausalD objective.
///
/// The student is initialised exactly as [`crate::models::train_base`] would
/// under the same `master`, and the head from a separate stream, so zero
/// lambdas reproduce base training bit for bit.
pub fn train_causald(
    config: ModelConfig,
    train: &TrainSet,
    teachers: &TeacherEnsemble,
    train_cfg: &TrainConfig,
    distill: &DistillConfig,
    master: u64,
) -> Result<(RecModel, FdaHead, Vec<EpochLog>), DistillError> {
    distill.validate()?;
    let mut student = RecModel::new(config, seed::derive(master, "init"))?;
    let dm = student.config.mediator_dim();
    if teachers.teachers.iter().any(|t| t.config.mediator_dim() != dm) {
        return Err(DistillError::Invalid("teacher and student architectures differ".into()));
    }
    let head = FdaHead::new(
        dm,
        student.config.embed_dim,
        distill.head_hidden,
        seed::derive(master, "fda-head"),
    );
    let mut objective = CausalObjective::new(teachers, head, distill.clone(), train_cfg.learning_rate);
    let logs = fit(&mut student, train, train_cfg, master, &mut objective)?;
    Ok((student, objective.head, logs))
}

pub const LOG_HEADER: &str = "epoch,L_Rec,L_BDA,L_FDA_distill,L_FDA_consistency,wall_seconds";

/// Writes per-epoch losses as CSV.
pub fn write_training_log(path: &Path, logs: &[EpochLog]) -> Result<(), DistillError> {
    let io = |source| DistillError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(f, "{LOG_HEADER}").map_err(io)?;
    for l in logs {
        writeln!(
            f,
            "{},{},{},{},{},{:.3}",
            l.epoch, l.rec, l.bda, l.distill, l.consistency, l.wall_seconds
        )
        .map_err(io)?;
    }
    f.flush().map_err(io)
}
