use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{DistillError, TeacherOutputs};
use crate::data::TrainSet;
use crate::models::{train_base, Batch, ModelConfig, RecModel, TrainConfig};
use crate::seed;
use crate::TensorError;

/// Frozen teachers with their prior weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherEnsemble {
    pub teachers: Vec<RecModel>,
    pub pz: Vec<f64>,
    /// Users per source subset.
    pub group_sizes: Vec<usize>,
    pub attribute: String,
    pub seeds: Vec<u64>,
}

/// On-disk description of an ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub attribute: String,
    pub checkpoints: Vec<PathBuf>,
    pub pz: Vec<f64>,
    pub group_sizes: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl TeacherEnsemble {
    /// `pz_k = sizes_k / sum(sizes)`.
    pub fn prior_from_sizes(sizes: &[usize]) -> Vec<f64> {
        let total: usize = sizes.iter().sum();
        sizes.iter().map(|&s| s as f64 / total as f64).collect()
    }

    pub fn len(&self) -> usize {
        self.teachers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.teachers.is_empty()
    }

    /// Saves each teacher as `teacher_{k}.cdtn` in `dir` (created if
    /// missing) and writes `ensemble.json`; returns the manifest path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf, DistillError> {
        std::fs::create_dir_all(dir).map_err(|source| DistillError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let mut checkpoints = Vec::new();
        for (k, t) in self.teachers.iter().enumerate() {
            let name = PathBuf::from(format!("teacher_{k}.cdtn"));
            t.save(&dir.join(&name))?;
            checkpoints.push(name);
        }
        let manifest = EnsembleManifest {
            attribute: self.attribute.clone(),
            checkpoints,
            pz: self.pz.clone(),
            group_sizes: self.group_sizes.clone(),
            seeds: self.seeds.clone(),
        };
        let path = dir.join("ensemble.json");
        let json = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&path, json).map_err(|source| DistillError::Io {
            path: path.clone(),
            source,
        })?;
        Ok(path)
    }

    /// Loads an ensemble; checkpoint paths resolve relative to the
    /// manifest's directory.
    pub fn load(manifest_path: &Path) -> Result<Self, DistillError> {
        let text = std::fs::read_to_string(manifest_path).map_err(|source| DistillError::Io {
            path: manifest_path.to_path_buf(),
            source,
        })?;
        let m: EnsembleManifest = serde_json::from_str(&text)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let teachers = m
            .checkpoints
            .iter()
            .map(|c| RecModel::load(&base.join(c)))
            .collect::<Result<Vec<_>, _>>()?;
        if teachers.len() != m.pz.len() {
            return Err(DistillError::Invalid("manifest pz and checkpoints differ in length".into()));
        }
        Ok(TeacherEnsemble {
            teachers,
            pz: m.pz,
            group_sizes: m.group_sizes,
            attribute: m.attribute,
            seeds: m.seeds,
        })
    }
}

/// Trains one teacher per subset, in parallel, each on the recommendation
/// loss alone; teacher `k` uses the sub-seed `teacher/{k}` of `master`.
pub fn train_teachers(
    subsets: &[TrainSet],
    attribute: &str,
    config: &ModelConfig,
    train_cfg: &TrainConfig,
    master: u64,
) -> Result<TeacherEnsemble, DistillError> {
    if subsets.is_empty() {
        return Err(DistillError::Invalid("need at least one subset".into()));
    }
    if let Some(index) = subsets.iter().position(|s| s.pairs.is_empty()) {
        return Err(DistillError::EmptySubset { index });
    }
    let seeds: Vec<u64> = (0..subsets.len())
        .map(|k| seed::derive(master, &format!("teacher/{k}")))
        .collect();
    let teachers = subsets
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(s, &seed)| train_base(config.clone(), s, train_cfg, seed).map(|(m, _)| m))
        .collect::<Result<Vec<_>, _>>()?;
    let group_sizes: Vec<usize> = subsets.iter().map(|s| s.active_users().len()).collect();
    Ok(TeacherEnsemble {
        teachers,
        pz: TeacherEnsemble::prior_from_sizes(&group_sizes),
        group_sizes,
        attribute: attribute.to_string(),
        seeds,
    })
}

/// Every teacher's mediator and target embedding for `batch`.
pub fn mediator_samples(
    teachers: &TeacherEnsemble,
    batch: &Batch,
) -> Result<TeacherOutputs, TensorError> {
    let outs = teachers
        .teachers
        .par_iter()
        .map(|t| t.encode(batch))
        .collect::<Result<Vec<_>, _>>()?;
    let (mediators, targets) = outs.into_iter().unzip();
    Ok(TeacherOutputs { mediators, targets })
}
