use causald_core::synth::{generate, ScmConfig};
use proptest::prelude::*;

fn config(n_users: usize, beta: f64, p: f64, seed: u64) -> ScmConfig {
    let mut c = ScmConfig::new(n_users, 200);
    c.confounder_strength = beta;
    c.confounder_prior = p;
    c.seed = seed;
    c
}

#[test]
fn no_confounding_gives_equal_cohort_click_rates() {
    let ds = generate(&config(4000, 0.0, 0.5, 1)).unwrap();
    let (mut n, mut k) = ([0.0f64; 2], [0.0f64; 2]);
    for e in &ds.train {
        let u = ds.confounder[e.user as usize] as usize;
        n[u] += 1.0;
        k[u] += e.label as f64;
    }
    let (r0, r1) = (k[0] / n[0], k[1] / n[1]);
    let pooled = (k[0] + k[1]) / (n[0] + n[1]);
    let se = (pooled * (1.0 - pooled) * (1.0 / n[0] + 1.0 / n[1])).sqrt();
    assert!((r0 - r1).abs() < 3.0 * se, "{r0} vs {r1}, se {se}");
}

#[test]
fn no_confounding_makes_observational_equal_oracle() {
    let ds = generate(&config(50, 0.0, 0.5, 2)).unwrap();
    for e in ds.test.iter().take(200) {
        let h = &ds.histories[e.user as usize];
        let gap = ds.observational(e.user, e.item) - ds.interventional_oracle(h, e.item);
        assert!(gap.abs() < 1e-15);
    }
}

#[test]
fn constant_confounder_coincides() {
    let ds = generate(&config(100, 2.0, 1.0, 3)).unwrap();
    assert!(ds.confounder.iter().all(|&u| u == 1));
    for e in ds.test.iter().take(200) {
        let h = &ds.histories[e.user as usize];
        assert_eq!(ds.observational(e.user, e.item), ds.interventional_oracle(h, e.item));
    }
}

#[test]
fn confounded_users_prefer_popular_histories() {
    let mut c = config(10_000, 2.0, 0.5, 4);
    c.train_events = 0;
    c.test_events = 0;
    let ds = generate(&c).unwrap();
    let mut sum = [0.0f64; 2];
    let mut n = [0.0f64; 2];
    for (u, h) in ds.histories.iter().enumerate() {
        let g = ds.confounder[u] as usize;
        for &i in h {
            sum[g] += c.popularity_scores[i as usize];
            n[g] += 1.0;
        }
    }
    assert!(sum[1] / n[1] > sum[0] / n[0]);
}

#[test]
fn oracle_reads_the_prior_not_the_sample() {
    let ds = generate(&config(40, 2.0, 0.3, 5)).unwrap();
    let mut flipped = ds.clone();
    for u in flipped.confounder.iter_mut() {
        *u = 1 - *u;
    }
    for e in ds.test.iter().take(100) {
        let h = &ds.histories[e.user as usize];
        let (p0, p1) = ds.click_probabilities(h, e.item);
        let expected = 0.7 * p0 + 0.3 * p1;
        let oracle = ds.interventional_oracle(h, e.item);
        assert!((oracle - expected).abs() < 1e-15, "{oracle} vs {expected}");
        assert_eq!(flipped.interventional_oracle(h, e.item), oracle);
    }
}

#[test]
fn observational_differs_from_oracle_under_confounding() {
    let ds = generate(&config(60, 2.0, 0.5, 6)).unwrap();
    let max_gap = ds
        .test
        .iter()
        .map(|e| {
            let h = &ds.histories[e.user as usize];
            (ds.observational(e.user, e.item) - ds.interventional_oracle(h, e.item)).abs()
        })
        .fold(0.0, f64::max);
    assert!(max_gap > 1e-3, "max gap {max_gap}");
}

#[test]
fn posterior_identifies_the_confounder() {
    let ds = generate(&config(400, 2.0, 0.5, 7)).unwrap();
    let correct = (0..400u32)
        .filter(|&u| (ds.posterior_u1(u) > 0.5) == (ds.confounder[u as usize] == 1))
        .count();
    assert!(correct > 300, "{correct} of 400");
}

#[test]
fn truth_sidecar_round_trips() {
    let ds = generate(&config(20, 2.0, 0.5, 8)).unwrap();
    let json = serde_json::to_string(&ds.truth()).unwrap();
    let back: causald_core::synth::ScmTruth = serde_json::from_str(&json).unwrap();
    assert_eq!(back, ds.truth());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn same_seed_is_bit_identical(seed in any::<u64>(), beta in 0.0f64..4.0, p in 0.0f64..=1.0) {
        let c = config(25, beta, p, seed);
        prop_assert_eq!(generate(&c).unwrap(), generate(&c).unwrap());
    }

    #[test]
    fn probabilities_stay_in_unit_interval(seed in any::<u64>()) {
        let ds = generate(&config(10, 3.0, 0.5, seed)).unwrap();
        for e in ds.train.iter().chain(&ds.test) {
            prop_assert!(e.p0 > 0.0 && e.p0 < 1.0 && e.p1 > 0.0 && e.p1 < 1.0);
            let o = ds.observational(e.user, e.item);
            prop_assert!(o >= e.p0.min(e.p1) && o <= e.p0.max(e.p1));
        }
    }
}
