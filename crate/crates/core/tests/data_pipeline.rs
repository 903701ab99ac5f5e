use causald_core::data::{
    activeness_groups, behavior_consistency, k_core_filter, leave_last_out, parse_movielens_reader,
    random_groups, sample_train_negatives, split_non_iid, InteractionLog, RawRecord, TrainPair,
    TrainSet, UserSequence, EVAL_NEGATIVES,
};
use proptest::prelude::*;

#[test]
fn movielens_line_becomes_positive_record() {
    let log = parse_movielens_reader("1::1193::5::978300760\n".as_bytes()).unwrap();
    assert_eq!(log.len(), 1);
    assert_eq!(log.user_raw, vec![1]);
    assert_eq!(log.item_raw, vec![1193]);
    assert_eq!(log.records[0].timestamp, 978300760);
    assert_eq!(log.records[0].label, 1);
}

fn train_with_user(consumed: Vec<u32>, n_items: usize) -> TrainSet {
    let pairs = (0..100_000)
        .map(|k| TrainPair {
            user: 0,
            end: 1,
            item: consumed[k % consumed.len()],
            label: 1.0,
        })
        .collect();
    TrainSet {
        n_users: 1,
        n_items,
        histories: vec![consumed.clone()],
        consumed: vec![consumed],
        pairs,
    }
}

#[test]
fn train_negatives_are_uniform_over_the_complement() {
    let consumed: Vec<u32> = (0..10).map(|i| i * 5).collect();
    let n_items = 60;
    let train = train_with_user(consumed.clone(), n_items);
    let pairs = sample_train_negatives(&train, 1, 11).unwrap();
    let mut counts = vec![0usize; n_items];
    for p in pairs.iter().filter(|p| p.label == 0.0) {
        counts[p.item as usize] += 1;
    }
    assert!(consumed.iter().all(|&i| counts[i as usize] == 0));
    let cells: Vec<usize> = (0..n_items)
        .filter(|i| !consumed.contains(&(*i as u32)))
        .map(|i| counts[i])
        .collect();
    let total: usize = cells.iter().sum();
    assert_eq!(total, 100_000);
    let expected = total as f64 / cells.len() as f64;
    let chi2: f64 = cells
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    let df = (cells.len() - 1) as f64;
    assert!(
        chi2 < df + 3.0 * (2.0 * df).sqrt(),
        "chi2 = {chi2} with {df} degrees of freedom"
    );
}

#[test]
fn activeness_subsets_respect_quantile_bounds() {
    let counts = vec![7, 3, 9, 1, 4, 4, 8, 2, 6, 5, 3];
    let a = activeness_groups(&counts, 3).unwrap();
    let mut sorted = counts.clone();
    sorted.sort_unstable();
    let mut start = 0;
    for (g, &size) in a.sizes.iter().enumerate() {
        let (lo, hi) = (sorted[start], sorted[start + size - 1]);
        for u in a.members(g) {
            let c = counts[u as usize];
            assert!(lo <= c && c <= hi, "user {u} count {c} outside [{lo}, {hi}]");
        }
        start += size;
    }
}

fn arb_log() -> impl Strategy<Value = InteractionLog> {
    prop::collection::vec((0u64..12, 0u64..10, 0i64..50), 1..200).prop_map(|v| {
        let raw: Vec<RawRecord> = v.into_iter().map(|(u, i, t)| (u, i, t, 1)).collect();
        InteractionLog::from_raw(&raw)
    })
}

fn arb_sequences() -> impl Strategy<Value = Vec<UserSequence>> {
    prop::collection::vec(prop::collection::btree_set(0u32..160, 2..40), 1..8).prop_map(|sets| {
        sets.into_iter()
            .enumerate()
            .map(|(u, s)| {
                let items: Vec<u32> = s.into_iter().collect();
                UserSequence {
                    user: u as u32,
                    timestamps: (0..items.len() as i64).collect(),
                    items,
                }
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn k_core_is_a_fixpoint(log in arb_log(), k in 1u32..5) {
        if let Ok(once) = k_core_filter(&log, k) {
            let mut users = vec![0u32; once.n_users()];
            let mut items = vec![0u32; once.n_items()];
            for r in &once.records {
                users[r.user as usize] += 1;
                items[r.item as usize] += 1;
            }
            prop_assert!(users.iter().chain(&items).all(|&c| c >= k));
            prop_assert_eq!(k_core_filter(&once, k).unwrap(), once);
        }
    }

    #[test]
    fn remapped_ids_are_dense(log in arb_log()) {
        let mut seen_u = vec![false; log.n_users()];
        let mut seen_i = vec![false; log.n_items()];
        for r in &log.records {
            seen_u[r.user as usize] = true;
            seen_i[r.item as usize] = true;
        }
        prop_assert!(seen_u.iter().chain(&seen_i).all(|&s| s));
    }

    #[test]
    fn sequences_are_chronological(log in arb_log()) {
        for s in log.sequences() {
            prop_assert!(s.timestamps.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn split_keeps_test_target_out_of_training(seqs in arb_sequences(), seed in any::<u64>()) {
        let (train, evals) = leave_last_out(&seqs, 160, seed).unwrap();
        for e in &evals {
            let u = e.user as usize;
            prop_assert!(!train.histories[u].contains(&e.target));
            prop_assert!(train.pairs.iter().all(|p| p.user != e.user || p.item != e.target));
            let mut negs = e.negatives.clone();
            negs.dedup();
            prop_assert_eq!(negs.len(), EVAL_NEGATIVES);
            prop_assert!(negs.iter().all(|&n| !seqs[u].items.contains(&n)));
        }
        let (train2, evals2) = leave_last_out(&seqs, 160, seed).unwrap();
        prop_assert_eq!(&train, &train2);
        prop_assert_eq!(&evals, &evals2);
        prop_assert_eq!(
            sample_train_negatives(&train, 2, seed).unwrap(),
            sample_train_negatives(&train2, 2, seed).unwrap()
        );
    }

    #[test]
    fn groups_partition_users(counts in prop::collection::vec(0usize..30, 2..60), g in 2usize..6, seed in any::<u64>()) {
        prop_assume!(g <= counts.len());
        for a in [activeness_groups(&counts, g).unwrap(), random_groups(counts.len(), g, seed).unwrap()] {
            prop_assert_eq!(a.sizes.iter().sum::<usize>(), counts.len());
            prop_assert!(a.groups.iter().all(|&x| x < g));
            let max = *a.sizes.iter().max().unwrap();
            let min = *a.sizes.iter().min().unwrap();
            prop_assert!(max - min <= 1);
            for (k, &size) in a.sizes.iter().enumerate() {
                prop_assert_eq!(a.members(k).len(), size);
            }
        }
    }

    #[test]
    fn non_iid_subsets_partition_pairs(seqs in arb_sequences(), g in 1usize..4, seed in any::<u64>()) {
        prop_assume!(g <= seqs.len());
        let (train, _) = leave_last_out(&seqs, 160, 0).unwrap();
        let a = random_groups(train.n_users, g, seed).unwrap();
        let subsets = split_non_iid(&train, &a);
        let mut union: Vec<TrainPair> = subsets.iter().flat_map(|s| s.pairs.clone()).collect();
        prop_assert_eq!(union.len(), train.pairs.len());
        union.sort_by_key(|p| (p.user, p.end));
        prop_assert_eq!(union, train.pairs.clone());
        for (k, s) in subsets.iter().enumerate() {
            prop_assert!(s.pairs.iter().all(|p| a.groups[p.user as usize] == k));
        }
    }

    #[test]
    fn consistency_scores_are_non_negative(seqs in arb_sequences()) {
        prop_assert!(behavior_consistency(&seqs, 18, 1e-6).iter().all(|&k| k >= 0.0 && k.is_finite()));
    }
}
