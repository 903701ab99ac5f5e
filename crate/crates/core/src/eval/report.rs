use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    heterogeneity, heterogeneity_report, instance_metrics, normalized_heterogeneity, EvalError,
    Heterogeneity, MetricRow, METRICS,
};
use crate::data::{split_non_iid, EvalInstance, GroupAssignment, TrainSet};
use crate::models::{train_base, Batch, ModelConfig, RecModel, TrainConfig};

/// Instances scored per forward pass.
const CHUNK: usize = 32;

/// Metrics for every instance, in input order.
pub fn score_instances(model: &RecModel, instances: &[EvalInstance]) -> Result<Vec<MetricRow>, EvalError> {
    let chunks = instances
        .par_chunks(CHUNK)
        .map(|chunk| {
            let rows = chunk.iter().flat_map(|inst| {
                let h = inst.history.as_slice();
                std::iter::once((inst.user, h, inst.target, 1.0))
                    .chain(inst.negatives.iter().map(move |&n| (inst.user, h, n, 0.0)))
            });
            let scores = model.score(&Batch::new(rows))?;
            let mut out = Vec::with_capacity(chunk.len());
            let mut at = 0;
            for inst in chunk {
                let n = 1 + inst.negatives.len();
                out.push(instance_metrics(scores[at], &scores[at + 1..at + n])?);
                at += n;
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

fn mean_row<'a>(rows: impl Iterator<Item = &'a MetricRow>) -> (MetricRow, usize) {
    let mut sum = [0.0; 5];
    let mut n = 0;
    for r in rows {
        for (s, x) in sum.iter_mut().zip(r) {
            *s += x;
        }
        n += 1;
    }
    (sum.map(|s| s / n as f64), n)
}

/// Mean metrics per group; every group must have at least one instance.
pub fn group_means(
    rows: &[MetricRow],
    instances: &[EvalInstance],
    assignment: &GroupAssignment,
) -> Result<Vec<MetricRow>, EvalError> {
    (0..assignment.n_groups())
        .map(|g| {
            let (m, n) = mean_row(
                rows.iter()
                    .zip(instances)
                    .filter(|(_, i)| assignment.groups[i.user as usize] == g)
                    .map(|(r, _)| r),
            );
            if n == 0 {
                Err(EvalError::Group {
                    group: g,
                    reason: "no evaluation instances".into(),
                })
            } else {
                Ok(m)
            }
        })
        .collect()
}

/// Trains one base model per group on that group's users only and scores it
/// on the same group's instances. Every group model starts from the same
/// seed as unified training.
pub fn groupwise_protocol(
    train: &TrainSet,
    test: &[EvalInstance],
    assignment: &GroupAssignment,
    config: &ModelConfig,
    train_cfg: &TrainConfig,
    master: u64,
) -> Result<Vec<MetricRow>, EvalError> {
    let subsets = split_non_iid(train, assignment);
    subsets
        .par_iter()
        .enumerate()
        .map(|(g, subset)| {
            if subset.pairs.is_empty() {
                return Err(EvalError::Group {
                    group: g,
                    reason: "no training pairs".into(),
                });
            }
            let own: Vec<EvalInstance> = test
                .iter()
                .filter(|i| assignment.groups[i.user as usize] == g)
                .cloned()
                .collect();
            if own.is_empty() {
                return Err(EvalError::Group {
                    group: g,
                    reason: "no evaluation instances".into(),
                });
            }
            let (model, _) = train_base(config.clone(), subset, train_cfg, master)?;
            let rows = score_instances(&model, &own)?;
            Ok(mean_row(rows.iter()).0)
        })
        .collect()
}

fn named(row: &MetricRow) -> BTreeMap<String, f64> {
    METRICS.iter().map(|m| m.to_string()).zip(row.iter().copied()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub group: usize,
    pub instances: usize,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub seed: u64,
    pub overall: BTreeMap<String, f64>,
    pub attribute: Option<String>,
    pub groups: Vec<GroupRow>,
    /// Keyed by metric name; empty until group-wise scores are attached.
    pub heterogeneity: BTreeMap<String, Heterogeneity>,
    pub heterogeneity_mean: Option<f64>,
    pub heterogeneity_normalized: Option<f64>,
    pub groupwise: Vec<GroupRow>,
    pub oracle_gap: Option<f64>,
    /// Per-instance `(user, metrics)`, written to the raw-scores CSV.
    #[serde(skip)]
    pub instances: Vec<(u32, MetricRow)>,
}

/// Scores `model` on `instances`, broken down by `assignment` if given.
pub fn evaluate(
    model: &RecModel,
    instances: &[EvalInstance],
    assignment: Option<&GroupAssignment>,
    tag: &str,
    seed: u64,
) -> Result<MetricsReport, EvalError> {
    let rows = score_instances(model, instances)?;
    let (overall, _) = mean_row(rows.iter());
    let groups = match assignment {
        Some(a) => group_means(&rows, instances, a)?
            .iter()
            .enumerate()
            .map(|(g, m)| GroupRow {
                group: g,
                instances: instances.iter().filter(|i| a.groups[i.user as usize] == g).count(),
                metrics: named(m),
            })
            .collect(),
        None => Vec::new(),
    };
    Ok(MetricsReport {
        model: tag.to_string(),
        seed,
        overall: named(&overall),
        attribute: assignment.map(|a| a.attribute.clone()),
        groups,
        heterogeneity: BTreeMap::new(),
        heterogeneity_mean: None,
        heterogeneity_normalized: None,
        groupwise: Vec::new(),
        oracle_gap: None,
        instances: instances.iter().map(|i| i.user).zip(rows).collect(),
    })
}

fn unnamed(m: &BTreeMap<String, f64>) -> MetricRow {
    METRICS.map(|k| m[k])
}

impl MetricsReport {
    /// Attaches group-wise scores and computes the heterogeneity statistics.
    pub fn attach_groupwise(&mut self, groupwise: &[MetricRow]) -> Result<(), EvalError> {
        let unified: Vec<MetricRow> = self.groups.iter().map(|g| unnamed(&g.metrics)).collect();
        if unified.len() != groupwise.len() {
            return Err(EvalError::GroupMismatch(unified.len(), groupwise.len()));
        }
        let mut per_metric = BTreeMap::new();
        for (m, name) in METRICS.iter().enumerate() {
            let u: Vec<f64> = unified.iter().map(|r| r[m]).collect();
            let g: Vec<f64> = groupwise.iter().map(|r| r[m]).collect();
            per_metric.insert(name.to_string(), heterogeneity(&u, &g)?);
        }
        self.heterogeneity_mean = Some(heterogeneity_report(&per_metric)?);
        self.heterogeneity_normalized = Some(normalized_heterogeneity(&unified, groupwise));
        self.heterogeneity = per_metric;
        self.groupwise = groupwise
            .iter()
            .enumerate()
            .map(|(g, m)| GroupRow {
                group: g,
                instances: self.groups[g].instances,
                metrics: named(m),
            })
            .collect();
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<(), EvalError> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|source| EvalError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Flat `model,metric,group,value` rows; `group` is `all` for overall
    /// values and `het` for heterogeneity.
    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        let mut out = String::from("model,metric,group,value\n");
        for (m, v) in &self.overall {
            out += &format!("{},{m},all,{v}\n", self.model);
        }
        for g in &self.groups {
            for (m, v) in &g.metrics {
                out += &format!("{},{m},{},{v}\n", self.model, g.group);
            }
        }
        for g in &self.groupwise {
            for (m, v) in &g.metrics {
                out += &format!("{},{m},groupwise-{},{v}\n", self.model, g.group);
            }
        }
        for (m, h) in &self.heterogeneity {
            out += &format!("{},S_h/{m},het,{}\n", self.model, h.s_h);
            out += &format!("{},S_h_star/{m},het,{}\n", self.model, h.s_h_star);
            out += &format!("{},S_h_circ/{m},het,{}\n", self.model, h.s_h_circ);
        }
        if let Some(h) = self.heterogeneity_mean {
            out += &format!("{},heterogeneity,het,{h}\n", self.model);
        }
        if let Some(gap) = self.oracle_gap {
            out += &format!("{},oracle_gap,all,{gap}\n", self.model);
        }
        std::fs::write(path, out).map_err(|source| EvalError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Per-instance metrics with each user's group.
    pub fn write_instance_csv(&self, path: &Path, assignment: Option<&GroupAssignment>) -> Result<(), EvalError> {
        let io = |source| EvalError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        writeln!(f, "user,group,{}", METRICS.join(",")).map_err(io)?;
        for (u, row) in &self.instances {
            let g = assignment.map_or(String::new(), |a| a.groups[*u as usize].to_string());
            let vals: Vec<String> = row.iter().map(f64::to_string).collect();
            writeln!(f, "{u},{g},{}", vals.join(",")).map_err(io)?;
        }
        f.flush().map_err(io)
    }
}
