use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DataError, UserSequence};

/// Longest history fed to an encoder.
pub const MAX_HISTORY: usize = 50;
/// Sampled negatives per evaluation instance.
pub const EVAL_NEGATIVES: usize = 100;

/// A training example: the target `item` with label `label`, whose history
/// is the prefix `histories[user][..end]` truncated to the last
/// [`MAX_HISTORY`] items.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainPair {
    pub user: u32,
    pub end: u32,
    pub item: u32,
    pub label: f64,
}

/// Training data in a shared id space.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSet {
    pub n_users: usize,
    pub n_items: usize,
    /// Chronological training items per user.
    pub histories: Vec<Vec<u32>>,
    /// Sorted items each user has ever interacted with, test target included.
    pub consumed: Vec<Vec<u32>>,
    pub pairs: Vec<TrainPair>,
}

impl TrainSet {
    pub fn history(&self, pair: &TrainPair) -> &[u32] {
        let h = &self.histories[pair.user as usize];
        let end = pair.end as usize;
        &h[end.saturating_sub(MAX_HISTORY)..end]
    }

    /// Training interaction count per user.
    pub fn activeness_counts(&self) -> Vec<usize> {
        self.histories.iter().map(Vec::len).collect()
    }

    /// Users with at least one training pair.
    pub fn active_users(&self) -> Vec<u32> {
        let mut seen = vec![false; self.n_users];
        for p in &self.pairs {
            seen[p.user as usize] = true;
        }
        (0..self.n_users as u32)
            .filter(|&u| seen[u as usize])
            .collect()
    }

    pub fn has_consumed(&self, user: u32, item: u32) -> bool {
        self.consumed[user as usize].binary_search(&item).is_ok()
    }
}

/// A held-out target ranked against sampled negatives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalInstance {
    pub user: u32,
    pub history: Vec<u32>,
    pub target: u32,
    pub negatives: Vec<u32>,
}

fn user_rng(seed: u64, user: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(user as u64);
    rng
}

fn sorted_unique(items: &[u32]) -> Vec<u32> {
    let mut v = items.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

/// Holds out each user's last item as the test target with
/// [`EVAL_NEGATIVES`] seeded negatives; every earlier position becomes a
/// positive training pair whose history is the preceding items.
pub fn leave_last_out(
    sequences: &[UserSequence],
    n_items: usize,
    seed: u64,
) -> Result<(TrainSet, Vec<EvalInstance>), DataError> {
    let n_users = sequences.len();
    let mut histories = vec![Vec::new(); n_users];
    let mut consumed = vec![Vec::new(); n_users];
    let mut pairs = Vec::new();
    let mut evals = Vec::with_capacity(n_users);
    for seq in sequences {
        let u = seq.user as usize;
        if seq.len() < 2 {
            return Err(DataError::SequenceTooShort { user: seq.user });
        }
        let seen = sorted_unique(&seq.items);
        let candidates: Vec<u32> = (0..n_items as u32)
            .filter(|i| seen.binary_search(i).is_err())
            .collect();
        if candidates.len() < EVAL_NEGATIVES {
            return Err(DataError::NotEnoughNegatives {
                user: seq.user,
                available: candidates.len(),
                needed: EVAL_NEGATIVES,
            });
        }
        let mut rng = user_rng(seed, seq.user);
        let mut negatives: Vec<u32> = index::sample(&mut rng, candidates.len(), EVAL_NEGATIVES)
            .into_iter()
            .map(|i| candidates[i])
            .collect();
        negatives.sort_unstable();
        let split = seq.len() - 1;
        let train = seq.items[..split].to_vec();
        for (pos, &item) in train.iter().enumerate().skip(1) {
            pairs.push(TrainPair {
                user: seq.user,
                end: pos as u32,
                item,
                label: 1.0,
            });
        }
        evals.push(EvalInstance {
            user: seq.user,
            history: train[split.saturating_sub(MAX_HISTORY)..].to_vec(),
            target: seq.items[split],
            negatives,
        });
        histories[u] = train;
        consumed[u] = seen;
    }
    Ok((
        TrainSet {
            n_users,
            n_items,
            histories,
            consumed,
            pairs,
        },
        evals,
    ))
}

/// Adds `n_neg` uniform negatives after every positive pair. Negatives share
/// the positive's history and are drawn from items the user never consumed.
pub fn sample_train_negatives(
    train: &TrainSet,
    n_neg: u32,
    seed: u64,
) -> Result<Vec<TrainPair>, DataError> {
    if n_neg == 0 {
        return Err(DataError::Invalid("n_neg must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(train.pairs.len() * (1 + n_neg as usize));
    let mut current: Option<(u32, ChaCha8Rng)> = None;
    for pair in train.pairs.iter().filter(|p| p.label > 0.0) {
        let rng = match &mut current {
            Some((u, rng)) if *u == pair.user => rng,
            _ => {
                current = Some((pair.user, user_rng(seed, pair.user)));
                &mut current.as_mut().unwrap().1
            }
        };
        if train.consumed[pair.user as usize].len() >= train.n_items {
            return Err(DataError::NegativesExhausted { user: pair.user });
        }
        out.push(*pair);
        for _ in 0..n_neg {
            let item = loop {
                let cand = rng.random_range(0..train.n_items as u32);
                if !train.has_consumed(pair.user, cand) {
                    break cand;
                }
            };
            out.push(TrainPair {
                item,
                label: 0.0,
                ..*pair
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(user: u32, items: &[u32]) -> UserSequence {
        UserSequence {
            user,
            items: items.to_vec(),
            timestamps: (0..items.len() as i64).collect(),
        }
    }

    #[test]
    fn protocol_on_three_items() {
        let (train, evals) = leave_last_out(&[seq(0, &[0, 1, 2])], 200, 1).unwrap();
        assert_eq!(train.histories[0], vec![0, 1]);
        assert_eq!(train.pairs.len(), 1);
        assert_eq!(train.history(&train.pairs[0]), &[0]);
        assert_eq!(train.pairs[0].item, 1);
        assert_eq!(evals[0].target, 2);
        assert_eq!(evals[0].history, vec![0, 1]);
        assert_eq!(evals[0].negatives.len(), EVAL_NEGATIVES);
    }

    #[test]
    fn negatives_are_deterministic_and_valid() {
        let seqs = vec![seq(0, &[3, 4, 5, 6]), seq(1, &[1, 2])];
        let (_, a) = leave_last_out(&seqs, 300, 9).unwrap();
        let (_, b) = leave_last_out(&seqs, 300, 9).unwrap();
        assert_eq!(a, b);
        for (e, s) in a.iter().zip(&seqs) {
            let mut n = e.negatives.clone();
            n.dedup();
            assert_eq!(n.len(), EVAL_NEGATIVES);
            assert!(n.iter().all(|i| !s.items.contains(i)));
        }
    }

    #[test]
    fn exact_complement_when_just_enough_items() {
        let (_, evals) = leave_last_out(&[seq(0, &[0, 1, 2])], 103, 4).unwrap();
        assert_eq!(evals[0].negatives, (3..103).collect::<Vec<u32>>());
    }

    #[test]
    fn too_few_candidates_names_the_user() {
        let err = leave_last_out(&[seq(7, &[0, 1, 2])], 102, 4).unwrap_err();
        assert!(matches!(err, DataError::NotEnoughNegatives { user: 7, .. }));
    }

    #[test]
    fn history_is_capped() {
        let items: Vec<u32> = (0..80).collect();
        let (train, evals) = leave_last_out(&[seq(0, &items)], 300, 0).unwrap();
        assert_eq!(evals[0].history.len(), MAX_HISTORY);
        assert_eq!(evals[0].history[0], 29);
        let last = train.pairs.last().unwrap();
        assert_eq!(train.history(last).len(), MAX_HISTORY);
    }

    #[test]
    fn one_negative_doubles_the_pairs() {
        let seqs = vec![seq(0, &[0, 1, 2, 3, 4]), seq(1, &[5, 6, 7])];
        let (train, _) = leave_last_out(&seqs, 150, 0).unwrap();
        let pairs = sample_train_negatives(&train, 1, 3).unwrap();
        assert_eq!(pairs.len(), 2 * train.pairs.len());
        assert_eq!(pairs.iter().filter(|p| p.label == 0.0).count(), train.pairs.len());
        assert_eq!(pairs, sample_train_negatives(&train, 1, 3).unwrap());
        for p in pairs.iter().filter(|p| p.label == 0.0) {
            assert!(!train.has_consumed(p.user, p.item));
        }
    }

    #[test]
    fn exhausted_pool_is_an_error() {
        let train = TrainSet {
            n_users: 1,
            n_items: 2,
            histories: vec![vec![0]],
            consumed: vec![vec![0, 1]],
            pairs: vec![TrainPair {
                user: 0,
                end: 1,
                item: 1,
                label: 1.0,
            }],
        };
        assert!(matches!(
            sample_train_negatives(&train, 1, 0),
            Err(DataError::NegativesExhausted { user: 0 })
        ));
    }
}
