use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::models::{Batch, RecModel};
use crate::synth::ScmDataset;

/// Mann-Whitney AUC with mid-ranks for ties; `None` when a class is empty.
pub fn binary_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = mid;
        }
        i = j + 1;
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return None;
    }
    let pos_rank: f64 = ranks.iter().zip(labels).filter(|(_, &y)| y == 1).map(|(r, _)| r).sum();
    Some((pos_rank - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg))
}

/// Scores of a model on a synthetic dataset's test events.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScmEval {
    /// Mean `|prediction - P(Y | do(X))|`.
    pub oracle_gap: f64,
    /// AUC against realised labels within each confounder cohort.
    pub auc_u0: f64,
    pub auc_u1: f64,
    pub auc_spread: f64,
}

pub fn evaluate_scm(model: &RecModel, ds: &ScmDataset) -> Result<ScmEval, EvalError> {
    let mut preds = Vec::with_capacity(ds.test.len());
    for chunk in ds.test.chunks(4096) {
        let batch = Batch::new(chunk.iter().map(|e| {
            (e.user, ds.histories[e.user as usize].as_slice(), e.item, e.label as f64)
        }));
        preds.extend(model.score(&batch)?);
    }
    let gap = ds
        .test
        .iter()
        .zip(&preds)
        .map(|(e, p)| (p - ds.interventional_oracle(&ds.histories[e.user as usize], e.item)).abs())
        .sum::<f64>()
        / ds.test.len() as f64;
    let cohort = |u: u8| {
        let (s, y): (Vec<f64>, Vec<u8>) = ds
            .test
            .iter()
            .zip(&preds)
            .filter(|(e, _)| ds.confounder[e.user as usize] == u)
            .map(|(e, &p)| (p, e.label))
            .unzip();
        binary_auc(&s, &y).ok_or_else(|| EvalError::Degenerate(format!("cohort u={u} lacks both labels")))
    };
    let (auc_u0, auc_u1) = (cohort(0)?, cohort(1)?);
    Ok(ScmEval {
        oracle_gap: gap,
        auc_u0,
        auc_u1,
        auc_spread: (auc_u0 - auc_u1).abs(),
    })
}
