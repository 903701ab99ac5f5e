//! Synthetic interactions from a structural causal model with a hidden
//! binary confounder `u`.
//!
//! Each user draws `u ~ Bernoulli(p)` and a latent taste vector. History
//! items are drawn without replacement with weight
//! `exp(<taste, v_i> + beta * u * pop(i))`, so `u` tilts histories towards
//! popular items. Candidate items outside the history are then clicked with
//! probability `sigmoid(match(x, y) + beta * u * pop(y))`, where `match`
//! depends on the history only through the mean of its item vectors. Since
//! `u` is stored, `P(Y | do(X))` is available exactly by marginalising `u` at
//! its prior.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Interaction, InteractionLog, TrainPair, TrainSet, MAX_HISTORY};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScmConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub latent_dim: usize,
    /// `P(u = 1)`.
    pub confounder_prior: f64,
    /// `beta`.
    pub confounder_strength: f64,
    pub popularity_scores: Vec<f64>,
    pub history_len: usize,
    pub train_events: usize,
    pub test_events: usize,
    pub match_scale: f64,
    pub match_bias: f64,
    pub seed: u64,
}

impl ScmConfig {
    /// Defaults with popularity falling linearly from 1 (item 0) to -1.
    pub fn new(n_users: usize, n_items: usize) -> Self {
        ScmConfig {
            n_users,
            n_items,
            latent_dim: 4,
            confounder_prior: 0.5,
            confounder_strength: 2.0,
            popularity_scores: linear_popularity(n_items),
            history_len: 20,
            train_events: 20,
            test_events: 10,
            match_scale: 1.0,
            match_bias: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Invalid(m.to_string()));
        if self.n_users == 0 || self.n_items == 0 {
            return bad("need at least one user and one item");
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be positive");
        }
        if !(0.0..=1.0).contains(&self.confounder_prior) {
            return bad("confounder_prior must lie in [0, 1]");
        }
        if !self.confounder_strength.is_finite() || self.confounder_strength < 0.0 {
            return bad("confounder_strength must be finite and non-negative");
        }
        if self.popularity_scores.len() != self.n_items {
            return bad("need one popularity score per item");
        }
        if self.popularity_scores.iter().any(|p| !p.is_finite()) {
            return bad("popularity scores must be finite");
        }
        if self.history_len == 0 || self.history_len > MAX_HISTORY {
            return bad("history_len must lie in [1, 50]");
        }
        if self.history_len + self.train_events + self.test_events > self.n_items {
            return bad("history plus candidate events exceed the item count");
        }
        if !self.match_scale.is_finite() || !self.match_bias.is_finite() {
            return bad("match parameters must be finite");
        }
        Ok(())
    }
}

pub fn linear_popularity(n_items: usize) -> Vec<f64> {
    if n_items < 2 {
        return vec![0.0; n_items];
    }
    (0..n_items)
        .map(|i| 1.0 - 2.0 * i as f64 / (n_items - 1) as f64)
        .collect()
}

/// A labelled candidate with its click probability under each value of `u`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScmEvent {
    pub user: u32,
    pub item: u32,
    pub label: u8,
    pub p0: f64,
    pub p1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScmDataset {
    pub config: ScmConfig,
    /// Hidden confounder per user. Only for scoring.
    pub confounder: Vec<u8>,
    pub histories: Vec<Vec<u32>>,
    pub train: Vec<ScmEvent>,
    pub test: Vec<ScmEvent>,
    user_latent: Vec<Vec<f64>>,
    item_latent: Vec<Vec<f64>>,
}

/// Ground truth written next to a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScmTruth {
    pub u: Vec<u8>,
    pub beta: f64,
    pub p: f64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `(1 - w) * p0 + w * p1`, kept inside `[min(p0, p1), max(p0, p1)]`
/// under rounding.
pub fn mix(w: f64, p0: f64, p1: f64) -> f64 {
    (p0 + w * (p1 - p0)).clamp(p0.min(p1), p0.max(p1))
}

fn normal_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

fn categorical(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut r = rng.random::<f64>() * total;
    for (k, &w) in weights.iter().enumerate() {
        if r < w {
            return k;
        }
        r -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

struct UserDraw {
    u: u8,
    latent: Vec<f64>,
    history: Vec<u32>,
    train: Vec<ScmEvent>,
    test: Vec<ScmEvent>,
}

pub fn generate(config: &ScmConfig) -> Result<ScmDataset, SynthError> {
    config.validate()?;
    let mut item_rng = ChaCha8Rng::seed_from_u64(config.seed);
    item_rng.set_stream(u64::MAX);
    let item_latent: Vec<Vec<f64>> = (0..config.n_items)
        .map(|_| normal_vec(&mut item_rng, config.latent_dim))
        .collect();
    let shell = ScmDataset {
        config: config.clone(),
        confounder: Vec::new(),
        histories: Vec::new(),
        train: Vec::new(),
        test: Vec::new(),
        user_latent: Vec::new(),
        item_latent,
    };
    let draws: Vec<UserDraw> = (0..config.n_users as u32)
        .into_par_iter()
        .map(|user| shell.draw_user(user))
        .collect();
    let mut ds = shell;
    for d in draws {
        ds.confounder.push(d.u);
        ds.user_latent.push(d.latent);
        ds.histories.push(d.history);
        ds.train.extend(d.train);
        ds.test.extend(d.test);
    }
    Ok(ds)
}

impl ScmDataset {
    fn draw_user(&self, user: u32) -> UserDraw {
        let c = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        rng.set_stream(user as u64);
        let u = u8::from(rng.random::<f64>() < c.confounder_prior);
        let latent = normal_vec(&mut rng, c.latent_dim);
        let mut weights: Vec<f64> = (0..c.n_items)
            .map(|i| self.history_score(&latent, i as u32, u).exp())
            .collect();
        let mut history = Vec::with_capacity(c.history_len);
        for _ in 0..c.history_len {
            let i = categorical(&mut rng, &weights);
            weights[i] = 0.0;
            history.push(i as u32);
        }
        let mut in_history = vec![false; c.n_items];
        for &i in &history {
            in_history[i as usize] = true;
        }
        let outside: Vec<u32> = (0..c.n_items as u32)
            .filter(|&i| !in_history[i as usize])
            .collect();
        let n_events = c.train_events + c.test_events;
        let mut events: Vec<ScmEvent> = index::sample(&mut rng, outside.len(), n_events)
            .into_iter()
            .map(|k| {
                let item = outside[k];
                let (p0, p1) = self.click_probabilities(&history, item);
                let p = if u == 1 { p1 } else { p0 };
                ScmEvent {
                    user,
                    item,
                    label: u8::from(rng.random::<f64>() < p),
                    p0,
                    p1,
                }
            })
            .collect();
        let test = events.split_off(c.train_events);
        UserDraw {
            u,
            latent,
            history,
            train: events,
            test,
        }
    }

    fn history_score(&self, latent: &[f64], item: u32, u: u8) -> f64 {
        dot(latent, &self.item_latent[item as usize])
            + self.config.confounder_strength
                * u as f64
                * self.config.popularity_scores[item as usize]
    }

    /// `match(x, y)`: scaled inner product of the mean history vector with
    /// the candidate's vector, plus a bias.
    pub fn interest_match(&self, history: &[u32], item: u32) -> f64 {
        let dim = self.config.latent_dim;
        let mut mean = vec![0.0; dim];
        for &h in history {
            for (m, v) in mean.iter_mut().zip(&self.item_latent[h as usize]) {
                *m += v;
            }
        }
        let n = history.len().max(1) as f64;
        let s = dot(&mean, &self.item_latent[item as usize]) / n;
        self.config.match_scale * s + self.config.match_bias
    }

    /// `(P(click | x, y, u = 0), P(click | x, y, u = 1))`.
    pub fn click_probabilities(&self, history: &[u32], item: u32) -> (f64, f64) {
        let m = self.interest_match(history, item);
        let shift = self.config.confounder_strength * self.config.popularity_scores[item as usize];
        (sigmoid(m), sigmoid(m + shift))
    }

    /// `P(Y = 1 | do(X = x))`: `u` marginalised at its prior.
    pub fn interventional_oracle(&self, history: &[u32], item: u32) -> f64 {
        let (p0, p1) = self.click_probabilities(history, item);
        mix(self.config.confounder_prior, p0, p1)
    }

    /// `P(u = 1 | history, taste)` for a generated user, from the exact
    /// likelihood of the sequential weighted draw.
    pub fn posterior_u1(&self, user: u32) -> f64 {
        let p = self.config.confounder_prior;
        if p == 0.0 || p == 1.0 {
            return p;
        }
        let latent = &self.user_latent[user as usize];
        let history = &self.histories[user as usize];
        let log_lik = |u: u8| -> f64 {
            let scores: Vec<f64> = (0..self.config.n_items as u32)
                .map(|i| self.history_score(latent, i, u))
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut remaining: f64 = scores.iter().map(|s| (s - max).exp()).sum();
            let mut ll = 0.0;
            for &h in history {
                let s = scores[h as usize] - max;
                ll += s - remaining.ln();
                remaining -= s.exp();
            }
            ll
        };
        let l1 = p.ln() + log_lik(1);
        let l0 = (1.0 - p).ln() + log_lik(0);
        sigmoid(l1 - l0)
    }

    /// Observational `P(Y = 1 | x, y)` for a generated user: `u` weighted by
    /// its posterior given the user's history.
    pub fn observational(&self, user: u32, item: u32) -> f64 {
        let (p0, p1) = self.click_probabilities(&self.histories[user as usize], item);
        mix(self.posterior_u1(user), p0, p1)
    }

    /// Training data: every training event becomes a labelled pair whose
    /// history is the user's full generated history.
    pub fn train_set(&self) -> TrainSet {
        let mut consumed: Vec<Vec<u32>> = self.histories.clone();
        for e in self.train.iter().chain(&self.test) {
            consumed[e.user as usize].push(e.item);
        }
        for c in &mut consumed {
            c.sort_unstable();
            c.dedup();
        }
        TrainSet {
            n_users: self.config.n_users,
            n_items: self.config.n_items,
            histories: self.histories.clone(),
            consumed,
            pairs: self
                .train
                .iter()
                .map(|e| TrainPair {
                    user: e.user,
                    end: self.histories[e.user as usize].len() as u32,
                    item: e.item,
                    label: e.label as f64,
                })
                .collect(),
        }
    }

    /// The generated data as an interaction log: history items as positives
    /// at times `0..H`, then training and test events in order.
    pub fn log(&self) -> InteractionLog {
        let n = self.config.n_users;
        let mut records = Vec::new();
        let mut next_time = vec![0i64; n];
        let mut push = |user: u32, item: u32, label: u8| {
            let t = &mut next_time[user as usize];
            records.push(Interaction {
                user,
                item,
                timestamp: *t,
                label,
            });
            *t += 1;
        };
        for (u, h) in self.histories.iter().enumerate() {
            for &i in h {
                push(u as u32, i, 1);
            }
        }
        for e in self.train.iter().chain(&self.test) {
            push(e.user, e.item, e.label);
        }
        InteractionLog {
            records,
            user_raw: (0..n as u64).collect(),
            item_raw: (0..self.config.n_items as u64).collect(),
        }
    }

    pub fn truth(&self) -> ScmTruth {
        ScmTruth {
            u: self.confounder.clone(),
            beta: self.config.confounder_strength,
            p: self.config.confounder_prior,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn marginalisation_example() {
        assert!((mix(0.5, 0.2, 0.6) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn posterior_shift_example() {
        let (p0, p1) = (0.2, 0.6);
        let diff = mix(0.9, p0, p1) - mix(0.5, p0, p1);
        assert!((diff - 0.4 * (p1 - p0)).abs() < 1e-15);
    }

    #[test]
    fn mix_stays_between_endpoints_for_tiny_weights() {
        let (p0, p1) = (8.776630787816732e-1, 8.94382838370599e-1);
        assert!(mix(4.0340194211457504e-16, p0, p1) >= p0);
        let (p0, p1) = (8.748761642756375e-1, 8.732165472800588e-1);
        assert!(mix(5.89661284915223e-16, p0, p1) <= p0);
        assert_eq!(mix(1.0, 0.3, 0.7), 0.7);
    }

    #[test]
    fn rejects_degenerate_configs() {
        assert!(generate(&ScmConfig::new(0, 100)).is_err());
        let mut c = ScmConfig::new(10, 100);
        c.confounder_prior = 1.5;
        assert!(generate(&c).is_err());
        let mut c = ScmConfig::new(10, 30);
        c.history_len = 20;
        assert!(generate(&c).is_err());
    }

    #[test]
    fn shapes_and_consumed_sets() {
        let ds = generate(&ScmConfig::new(30, 80)).unwrap();
        let c = &ds.config;
        assert_eq!(ds.train.len(), 30 * c.train_events);
        assert_eq!(ds.test.len(), 30 * c.test_events);
        let train = ds.train_set();
        for e in &ds.test {
            assert!(!ds.histories[e.user as usize].contains(&e.item));
            assert!(train.has_consumed(e.user, e.item));
        }
        for h in &ds.histories {
            let mut s = h.clone();
            s.sort_unstable();
            s.dedup();
            assert_eq!(s.len(), c.history_len);
        }
        assert_eq!(ds.log().len(), 30 * (c.history_len + c.train_events + c.test_events));
    }
}
