//! Ranking metrics, per-group breakdowns, heterogeneity and significance.

mod report;
mod stats;
mod synthetic;

pub use report::{
    evaluate, group_means, groupwise_protocol, score_instances, GroupRow, MetricsReport,
};
pub use stats::{t_test_two_sided, WelchTest};
pub use synthetic::{binary_auc, evaluate_scm, ScmEval};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DataError;
use crate::models::ModelError;
use crate::TensorError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no negatives to rank against")]
    EmptyNegatives,
    #[error("heterogeneity needs at least two groups, got {0}")]
    TooFewGroups(usize),
    #[error("group partitions differ: {0} vs {1} groups")]
    GroupMismatch(usize, usize),
    #[error("metric {0} missing from heterogeneity report")]
    MissingMetric(String),
    #[error("degenerate samples: {0}")]
    Degenerate(String),
    #[error("group {group}: {reason}")]
    Group { group: usize, reason: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Metric names in report order.
pub const METRICS: [&str; 5] = ["auc", "recall@5", "recall@10", "ndcg@5", "ndcg@10"];

/// Per-instance values of [`METRICS`].
pub type MetricRow = [f64; 5];

/// Fraction of negatives scored strictly below the positive, ties counting
/// one half.
pub fn auc_single(pos: f64, negs: &[f64]) -> Result<f64, EvalError> {
    if negs.is_empty() {
        return Err(EvalError::EmptyNegatives);
    }
    let below = negs.iter().filter(|&&n| n < pos).count() as f64;
    let ties = negs.iter().filter(|&&n| n == pos).count() as f64;
    Ok((below + 0.5 * ties) / negs.len() as f64)
}

/// `1 + #(negatives scored at or above the positive)`; ties rank against
/// the positive.
pub fn rank_of(pos: f64, negs: &[f64]) -> usize {
    1 + negs.iter().filter(|&&n| n >= pos).count()
}

/// `(recall@k, ndcg@k)` for a single positive at rank `r`.
pub fn metrics_at_rank(r: usize, k: usize) -> (f64, f64) {
    if r <= k {
        (1.0, 1.0 / ((r + 1) as f64).log2())
    } else {
        (0.0, 0.0)
    }
}

pub fn rank_metrics(pos: f64, negs: &[f64], k: usize) -> (f64, f64) {
    metrics_at_rank(rank_of(pos, negs), k)
}

/// All of [`METRICS`] for one instance.
pub fn instance_metrics(pos: f64, negs: &[f64]) -> Result<MetricRow, EvalError> {
    let auc = auc_single(pos, negs)?;
    let r = rank_of(pos, negs);
    let (r5, n5) = metrics_at_rank(r, 5);
    let (r10, n10) = metrics_at_rank(r, 10);
    Ok([auc, r5, r10, n5, n10])
}

/// Sample standard deviation (divisor `n - 1`).
pub fn sample_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Heterogeneity {
    /// Spread across groups under unified training.
    pub s_h: f64,
    /// Spread across groups under group-wise training.
    pub s_h_star: f64,
    /// `s_h - s_h_star`; may be negative.
    pub s_h_circ: f64,
}

pub fn heterogeneity(unified: &[f64], groupwise: &[f64]) -> Result<Heterogeneity, EvalError> {
    if unified.len() != groupwise.len() {
        return Err(EvalError::GroupMismatch(unified.len(), groupwise.len()));
    }
    if unified.len() < 2 {
        return Err(EvalError::TooFewGroups(unified.len()));
    }
    let s_h = sample_std(unified);
    let s_h_star = sample_std(groupwise);
    Ok(Heterogeneity {
        s_h,
        s_h_star,
        s_h_circ: s_h - s_h_star,
    })
}

/// Unweighted mean of `s_h_circ` over all five metrics.
pub fn heterogeneity_report(
    per_metric: &std::collections::BTreeMap<String, Heterogeneity>,
) -> Result<f64, EvalError> {
    let mut total = 0.0;
    for m in METRICS {
        total += per_metric
            .get(m)
            .ok_or_else(|| EvalError::MissingMetric(m.to_string()))?
            .s_h_circ;
    }
    Ok(total / METRICS.len() as f64)
}

/// Diagnostic variant: each spread divided by its mean group score before
/// differencing, then averaged over metrics.
pub fn normalized_heterogeneity(unified: &[MetricRow], groupwise: &[MetricRow]) -> f64 {
    let cv = |rows: &[MetricRow], m: usize| {
        let xs: Vec<f64> = rows.iter().map(|r| r[m]).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        if mean == 0.0 {
            0.0
        } else {
            sample_std(&xs) / mean
        }
    };
    (0..METRICS.len())
        .map(|m| cv(unified, m) - cv(groupwise, m))
        .sum::<f64>()
        / METRICS.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_hand_examples() {
        assert_eq!(auc_single(1.0, &[0.1, 0.2]).unwrap(), 1.0);
        assert_eq!(auc_single(0.0, &[0.1, 0.2]).unwrap(), 0.0);
        assert!((auc_single(0.5, &[0.4, 0.6, 0.6]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(auc_single(0.5, &[]).is_err());
    }

    #[test]
    fn ties_rank_against_the_positive() {
        assert_eq!(rank_of(0.5, &[0.5, 0.5, 0.1]), 3);
        assert_eq!(rank_of(0.5, &[0.6, 0.7, 0.1]), 3);
        assert_eq!(rank_metrics(0.5, &[0.6, 0.7], 5), (1.0, 0.5));
        assert_eq!(metrics_at_rank(1, 10), (1.0, 1.0));
        assert_eq!(metrics_at_rank(11, 10), (0.0, 0.0));
    }

    #[test]
    fn heterogeneity_examples() {
        let h = heterogeneity(&[0.7, 0.9], &[0.8, 0.8]).unwrap();
        assert!((h.s_h - 0.02f64.sqrt()).abs() < 1e-12);
        assert_eq!(h.s_h_star, 0.0);
        assert_eq!(heterogeneity(&[0.3; 4], &[0.1, 0.2, 0.3, 0.4]).unwrap().s_h, 0.0);
        assert!(heterogeneity(&[0.3], &[0.3]).is_err());
    }

    #[test]
    fn report_needs_every_metric() {
        let mut m = std::collections::BTreeMap::new();
        for (k, name) in METRICS.iter().enumerate() {
            let c = 0.1 * (k + 1) as f64;
            m.insert(name.to_string(), Heterogeneity { s_h: c, s_h_star: 0.0, s_h_circ: c });
        }
        assert!((heterogeneity_report(&m).unwrap() - 0.3).abs() < 1e-12);
        m.remove("ndcg@5");
        assert!(matches!(heterogeneity_report(&m), Err(EvalError::MissingMetric(_))));
    }
}
