use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, TrainSet, UserSequence};

/// A partition of users into `n_groups` groups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupAssignment {
    pub attribute: String,
    /// Group index per dense user id.
    pub groups: Vec<usize>,
    pub sizes: Vec<usize>,
}

impl GroupAssignment {
    pub fn n_groups(&self) -> usize {
        self.sizes.len()
    }

    pub fn members(&self, group: usize) -> Vec<u32> {
        self.groups
            .iter()
            .enumerate()
            .filter(|(_, &g)| g == group)
            .map(|(u, _)| u as u32)
            .collect()
    }

    fn from_order(attribute: &str, order: &[usize], n_users: usize, n_groups: usize) -> Self {
        let base = n_users / n_groups;
        let extra = n_users % n_groups;
        let sizes: Vec<usize> = (0..n_groups)
            .map(|g| base + usize::from(g < extra))
            .collect();
        let mut groups = vec![0; n_users];
        let mut pos = 0;
        for (g, &size) in sizes.iter().enumerate() {
            for &u in &order[pos..pos + size] {
                groups[u] = g;
            }
            pos += size;
        }
        GroupAssignment {
            attribute: attribute.to_string(),
            groups,
            sizes,
        }
    }
}

fn check_groups(n_groups: usize, n_users: usize) -> Result<(), DataError> {
    if n_groups == 0 || n_groups > n_users {
        return Err(DataError::TooManyGroups {
            groups: n_groups,
            users: n_users,
        });
    }
    Ok(())
}

/// Sorts users by `score` ascending (ties by user id) and cuts the order into
/// `n_groups` contiguous blocks whose sizes differ by at most one; earlier
/// blocks take the remainder.
pub fn quantile_groups(
    attribute: &str,
    scores: &[f64],
    n_groups: usize,
) -> Result<GroupAssignment, DataError> {
    check_groups(n_groups, scores.len())?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    Ok(GroupAssignment::from_order(
        attribute,
        &order,
        scores.len(),
        n_groups,
    ))
}

/// Quantile groups over training interaction counts.
pub fn activeness_groups(counts: &[usize], n_groups: usize) -> Result<GroupAssignment, DataError> {
    if n_groups < 2 {
        return Err(DataError::Invalid("activeness needs at least 2 groups".into()));
    }
    let scores: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    quantile_groups("activeness", &scores, n_groups)
}

/// Mean training-history frequency of each user's history items; users
/// with an empty history score 0.
pub fn history_popularity(train: &TrainSet) -> Vec<f64> {
    let mut freq = vec![0usize; train.n_items];
    for h in &train.histories {
        for &i in h {
            freq[i as usize] += 1;
        }
    }
    train
        .histories
        .iter()
        .map(|h| {
            if h.is_empty() {
                0.0
            } else {
                h.iter().map(|&i| freq[i as usize] as f64).sum::<f64>() / h.len() as f64
            }
        })
        .collect()
}

/// Balanced groups over a seeded random permutation (the homogeneous split).
pub fn random_groups(
    n_users: usize,
    n_groups: usize,
    seed: u64,
) -> Result<GroupAssignment, DataError> {
    check_groups(n_groups, n_users)?;
    let mut order: Vec<usize> = (0..n_users).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(GroupAssignment::from_order("random", &order, n_users, n_groups))
}

/// Per-user KL divergence between the popularity-cluster distributions of
/// the first and second halves of the user's sequence.
///
/// Items are ranked by global popularity (count descending, ties by id) and
/// cut into `n_clusters` equal-count clusters. Each half's distribution is
/// smoothed as `(p + eps) / (1 + n_clusters * eps)`. Users with fewer than two
/// items score 0.
pub fn behavior_consistency(sequences: &[UserSequence], n_clusters: usize, eps: f64) -> Vec<f64> {
    let n_items = sequences
        .iter()
        .flat_map(|s| s.items.iter())
        .map(|&i| i as usize + 1)
        .max()
        .unwrap_or(0);
    let mut counts = vec![0usize; n_items];
    for s in sequences {
        for &i in &s.items {
            counts[i as usize] += 1;
        }
    }
    let mut ranked: Vec<usize> = (0..n_items).filter(|&i| counts[i] > 0).collect();
    ranked.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let mut cluster = vec![0usize; n_items];
    let n_ranked = ranked.len().max(1);
    for (rank, &item) in ranked.iter().enumerate() {
        cluster[item] = rank * n_clusters / n_ranked;
    }
    let distribution = |items: &[u32]| -> Vec<f64> {
        let mut hist = vec![0.0; n_clusters];
        for &i in items {
            hist[cluster[i as usize]] += 1.0;
        }
        let n = items.len() as f64;
        let norm = 1.0 + n_clusters as f64 * eps;
        hist.iter().map(|&c| (c / n + eps) / norm).collect()
    };
    sequences
        .iter()
        .map(|s| {
            if s.len() < 2 {
                return 0.0;
            }
            let half = s.len() / 2;
            let past = distribution(&s.items[..half]);
            let now = distribution(&s.items[half..]);
            past.iter()
                .zip(&now)
                .map(|(&p, &q)| p * (p / q).ln())
                .sum()
        })
        .collect()
}

/// Splits training data into one user-disjoint subset per group; every
/// subset keeps the full id space.
pub fn split_non_iid(train: &TrainSet, assignment: &GroupAssignment) -> Vec<TrainSet> {
    (0..assignment.n_groups())
        .map(|g| {
            let keep = |u: usize| assignment.groups[u] == g;
            TrainSet {
                n_users: train.n_users,
                n_items: train.n_items,
                histories: train
                    .histories
                    .iter()
                    .enumerate()
                    .map(|(u, h)| if keep(u) { h.clone() } else { Vec::new() })
                    .collect(),
                consumed: train.consumed.clone(),
                pairs: train
                    .pairs
                    .iter()
                    .filter(|p| keep(p.user as usize))
                    .copied()
                    .collect(),
            }
        })
        .collect()
}
