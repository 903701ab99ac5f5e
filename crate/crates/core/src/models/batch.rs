use std::sync::Arc;

use crate::data::{EvalInstance, TrainPair, TrainSet, MAX_HISTORY};

/// Rows of `(user, history, target, label)` with histories padded to the
/// longest one in the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub users: Vec<u32>,
    /// Flattened `[B * width]` history item ids; padding slots hold item 0.
    pub history: Arc<[usize]>,
    pub lengths: Arc<[usize]>,
    pub width: usize,
    pub targets: Arc<[usize]>,
    pub labels: Vec<f64>,
}

impl Batch {
    /// Builds a batch from rows; histories longer than [`MAX_HISTORY`] keep
    /// their most recent items.
    pub fn new<'a>(rows: impl IntoIterator<Item = (u32, &'a [u32], u32, f64)>) -> Self {
        let rows: Vec<_> = rows.into_iter().collect();
        Self::padded(&rows, 1)
    }

    /// Like [`Batch::new`] but pads to at least `min_width` slots.
    pub fn padded(rows: &[(u32, &[u32], u32, f64)], min_width: usize) -> Self {
        let clip = |h: &[u32]| h.len().min(MAX_HISTORY);
        let width = rows
            .iter()
            .map(|r| clip(r.1))
            .max()
            .unwrap_or(0)
            .max(min_width)
            .max(1);
        let mut history = vec![0usize; rows.len() * width];
        let mut lengths = Vec::with_capacity(rows.len());
        for (b, &(_, h, _, _)) in rows.iter().enumerate() {
            let h = &h[h.len() - clip(h)..];
            for (slot, &item) in history[b * width..].iter_mut().zip(h) {
                *slot = item as usize;
            }
            lengths.push(h.len());
        }
        Batch {
            users: rows.iter().map(|r| r.0).collect(),
            history: history.into(),
            lengths: lengths.into(),
            width,
            targets: rows.iter().map(|r| r.2 as usize).collect(),
            labels: rows.iter().map(|r| r.3).collect(),
        }
    }

    pub fn from_pairs(train: &TrainSet, pairs: &[TrainPair]) -> Self {
        Self::new(
            pairs
                .iter()
                .map(|p| (p.user, train.history(p), p.item, p.label)),
        )
    }

    /// The target (label 1) followed by every negative (label 0), all
    /// sharing the instance's history.
    pub fn from_eval(inst: &EvalInstance) -> Self {
        let h = inst.history.as_slice();
        Self::new(
            std::iter::once((inst.user, h, inst.target, 1.0))
                .chain(inst.negatives.iter().map(|&n| (inst.user, h, n, 0.0))),
        )
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    /// Row index of every history slot.
    pub fn row_of_slot(&self) -> Arc<[usize]> {
        (0..self.len())
            .flat_map(|b| std::iter::repeat_n(b, self.width))
            .collect()
    }

    pub fn user_index(&self) -> Arc<[usize]> {
        self.users.iter().map(|&u| u as usize).collect()
    }
}
