//! Interaction logs and the preprocessing protocol: parsing, k-core
//! filtering, chronological sequences, leave-last-out splitting, negative
//! sampling and user groupings.

mod filter;
mod groups;
mod io;
mod parse;
mod split;

pub use filter::k_core_filter;
pub use groups::{
    activeness_groups, behavior_consistency, history_popularity, quantile_groups, random_groups, split_non_iid,
    GroupAssignment,
};
pub use io::{
    load_dataset, read_group_sidecar, save_dataset, write_group_sidecar, GroupRecord,
};
pub use parse::{parse_movielens, parse_movielens_reader, parse_tsv, parse_tsv_reader};
pub use split::{
    leave_last_out, sample_train_negatives, EvalInstance, TrainPair, TrainSet, EVAL_NEGATIVES,
    MAX_HISTORY,
};

use std::collections::BTreeMap;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("dataset is empty after filtering")]
    EmptyDataset,
    #[error("user {user} has fewer than two interactions")]
    SequenceTooShort { user: u32 },
    #[error("user {user} has only {available} candidate negatives, {needed} needed")]
    NotEnoughNegatives {
        user: u32,
        available: usize,
        needed: usize,
    },
    #[error("user {user} has consumed every item; no negatives left")]
    NegativesExhausted { user: u32 },
    #[error("cannot form {groups} groups from {users} users")]
    TooManyGroups { groups: usize, users: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("container error: {0}")]
    Container(#[from] crate::tensor::CheckpointError),
}

/// One `(user, item, timestamp, label)` record with dense ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interaction {
    pub user: u32,
    pub item: u32,
    pub timestamp: i64,
    pub label: u8,
}

/// Interaction records with ids remapped to `[0, n_users)` and
/// `[0, n_items)`; `user_raw[u]` and `item_raw[i]` give the original ids.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InteractionLog {
    pub records: Vec<Interaction>,
    pub user_raw: Vec<u64>,
    pub item_raw: Vec<u64>,
}

/// A raw `(user, item, timestamp, label)` record before id remapping.
pub type RawRecord = (u64, u64, i64, u8);

impl InteractionLog {
    /// Builds a log from raw ids, densifying users and items in ascending raw
    /// id order. Record order is preserved.
    pub fn from_raw(raw: &[RawRecord]) -> Self {
        let mut users = BTreeMap::new();
        let mut items = BTreeMap::new();
        for &(u, i, _, _) in raw {
            users.insert(u, 0u32);
            items.insert(i, 0u32);
        }
        for (dense, v) in users.values_mut().enumerate() {
            *v = dense as u32;
        }
        for (dense, v) in items.values_mut().enumerate() {
            *v = dense as u32;
        }
        let records = raw
            .iter()
            .map(|&(u, i, t, l)| Interaction {
                user: users[&u],
                item: items[&i],
                timestamp: t,
                label: l,
            })
            .collect();
        InteractionLog {
            records,
            user_raw: users.into_keys().collect(),
            item_raw: items.into_keys().collect(),
        }
    }

    pub fn n_users(&self) -> usize {
        self.user_raw.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_raw.len()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn to_raw(&self) -> Vec<RawRecord> {
        self.records
            .iter()
            .map(|r| {
                (
                    self.user_raw[r.user as usize],
                    self.item_raw[r.item as usize],
                    r.timestamp,
                    r.label,
                )
            })
            .collect()
    }

    /// Chronological positive sequences, one per dense user id. Equal
    /// timestamps keep file order.
    pub fn sequences(&self) -> Vec<UserSequence> {
        let mut seqs: Vec<UserSequence> = (0..self.n_users() as u32)
            .map(|user| UserSequence {
                user,
                items: Vec::new(),
                timestamps: Vec::new(),
            })
            .collect();
        let mut per_user: Vec<Vec<(i64, u32)>> = vec![Vec::new(); self.n_users()];
        for r in self.records.iter().filter(|r| r.label == 1) {
            per_user[r.user as usize].push((r.timestamp, r.item));
        }
        for (seq, mut events) in seqs.iter_mut().zip(per_user) {
            events.sort_by_key(|&(t, _)| t);
            seq.timestamps = events.iter().map(|e| e.0).collect();
            seq.items = events.iter().map(|e| e.1).collect();
        }
        seqs
    }
}

/// A user's positive items in chronological order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSequence {
    pub user: u32,
    pub items: Vec<u32>,
    pub timestamps: Vec<i64>,
}

impl UserSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}
