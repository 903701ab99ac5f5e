//! Single-teacher KD and inverse-propensity reweighting.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::DistillError;
use crate::data::{GroupAssignment, TrainSet};
use crate::models::{
    fit, train_base, Batch, Component, EpochLog, ExtraTerms, Forward, ModelConfig, NoExtra,
    Objective, RecModel, TrainConfig,
};
use crate::seed;
use crate::{Graph, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdConfig {
    pub weight: f64,
    /// Softens both teacher and student logits; 1 leaves them unchanged.
    pub temperature: f64,
}

impl Default for KdConfig {
    fn default() -> Self {
        KdConfig {
            weight: 1.0,
            temperature: 1.0,
        }
    }
}

/// BCE of the student against a frozen teacher's soft labels.
pub struct KdObjective<'a> {
    pub teacher: &'a RecModel,
    pub config: KdConfig,
}

fn soften(p: f64, t: f64) -> f64 {
    if t == 1.0 {
        return p;
    }
    let logit = (p / (1.0 - p)).ln();
    1.0 / (1.0 + (-logit / t).exp())
}

impl Objective for KdObjective<'_> {
    fn extra_terms(
        &mut self,
        g: &mut Graph,
        _student: &RecModel,
        fwd: &Forward,
        batch: &Batch,
    ) -> Result<ExtraTerms, TensorError> {
        let t = self.config.temperature;
        let soft: Vec<f64> = self
            .teacher
            .score(batch)?
            .into_iter()
            .map(|p| soften(p, t))
            .collect();
        let target = g.constant(Tensor::column(soft));
        let student = if t == 1.0 {
            fwd.prob
        } else {
            let z = g.scale(fwd.logit, 1.0 / t)?;
            g.sigmoid(z)?
        };
        let kd = g.bce(student, target, None)?;
        let total = g.scale(kd, self.config.weight)?;
        Ok(ExtraTerms {
            total: Some(total),
            parts: vec![(Component::Distill, kd)],
        })
    }
}

/// Trains the KD teacher on all users with the sub-seed `kd-teacher`.
pub fn train_kd_teacher(
    config: ModelConfig,
    train: &TrainSet,
    cfg: &TrainConfig,
    master: u64,
) -> Result<RecModel, DistillError> {
    Ok(train_base(config, train, cfg, seed::derive(master, "kd-teacher"))?.0)
}

/// Trains a student against `teacher`; initialisation and batch order match
/// base training under the same `master`.
pub fn train_kd_student(
    config: ModelConfig,
    train: &TrainSet,
    teacher: &RecModel,
    cfg: &TrainConfig,
    kd: KdConfig,
    master: u64,
) -> Result<(RecModel, Vec<EpochLog>), DistillError> {
    if !(kd.temperature > 0.0 && kd.weight >= 0.0) {
        return Err(DistillError::Invalid("kd needs temperature > 0 and weight >= 0".into()));
    }
    let mut student = RecModel::new(config, seed::derive(master, "init"))?;
    let mut objective = KdObjective {
        teacher,
        config: kd,
    };
    let logs = fit(&mut student, train, cfg, master, &mut objective)?;
    Ok((student, logs))
}

/// Teacher on all users followed by a distilled student.
pub fn train_kd_baseline(
    config: ModelConfig,
    train: &TrainSet,
    cfg: &TrainConfig,
    kd: KdConfig,
    master: u64,
) -> Result<(RecModel, Vec<EpochLog>), DistillError> {
    let teacher = train_kd_teacher(config.clone(), train, cfg, master)?;
    train_kd_student(config, train, &teacher, cfg, kd, master)
}

/// Propensities `p(g | i)` per item and group, from training histories with
/// one pseudo-count per group.
#[derive(Debug, Clone, PartialEq)]
pub struct IpsWeights {
    /// `[n_items][n_groups]`.
    pub propensity: Vec<Vec<f64>>,
    pub user_group: Vec<usize>,
    pub clip: f64,
}

impl IpsWeights {
    pub fn new(train: &TrainSet, assignment: &GroupAssignment, clip: f64) -> Result<Self, DistillError> {
        if !(clip > 0.0 && clip <= 1.0) {
            return Err(DistillError::Invalid(format!("clip threshold {clip} outside (0, 1]")));
        }
        if assignment.groups.len() != train.n_users {
            return Err(DistillError::Invalid("group assignment does not cover every user".into()));
        }
        let n_groups = assignment.n_groups();
        let mut counts = vec![vec![0usize; n_groups]; train.n_items];
        for (u, h) in train.histories.iter().enumerate() {
            let g = assignment.groups[u];
            for &i in h {
                counts[i as usize][g] += 1;
            }
        }
        let propensity = counts
            .into_iter()
            .map(|c| {
                let total: usize = c.iter().sum();
                let denom = (total + n_groups) as f64;
                c.into_iter().map(|x| (x + 1) as f64 / denom).collect()
            })
            .collect();
        Ok(IpsWeights {
            propensity,
            user_group: assignment.groups.clone(),
            clip,
        })
    }

    /// `1 / max(p(g(user) | item), clip)`.
    pub fn weight(&self, user: u32, item: u32) -> f64 {
        let p = self.propensity[item as usize][self.user_group[user as usize]];
        1.0 / p.max(self.clip)
    }
}

/// Per-sample weights for a batch's rows.
pub fn ips_weights(weights: &IpsWeights, batch: &Batch) -> Arc<[f64]> {
    batch
        .users
        .iter()
        .zip(batch.targets.iter())
        .map(|(&u, &i)| weights.weight(u, i as u32))
        .collect()
}

/// Reweights the recommendation loss by inverse propensity.
pub struct IpsObjective<'a>(pub &'a IpsWeights);

impl Objective for IpsObjective<'_> {
    fn extra_terms(
        &mut self,
        g: &mut Graph,
        student: &RecModel,
        fwd: &Forward,
        batch: &Batch,
    ) -> Result<ExtraTerms, TensorError> {
        NoExtra.extra_terms(g, student, fwd, batch)
    }

    fn sample_weights(&self, batch: &Batch) -> Option<Arc<[f64]>> {
        Some(ips_weights(self.0, batch))
    }
}

pub fn train_ips(
    config: ModelConfig,
    train: &TrainSet,
    weights: &IpsWeights,
    cfg: &TrainConfig,
    master: u64,
) -> Result<(RecModel, Vec<EpochLog>), DistillError> {
    let mut student = RecModel::new(config, seed::derive(master, "init"))?;
    let logs = fit(&mut student, train, cfg, master, &mut IpsObjective(weights))?;
    Ok((student, logs))
}
