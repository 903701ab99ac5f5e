//! Flat `key = value` run configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use causald_core::distill::FeatureMode;
use causald_core::models::Arch;
use causald_core::synth::ScmConfig;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {reason}")]
    Value { key: String, reason: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Movielens(PathBuf),
    Tsv(PathBuf),
    Synth,
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dataset::Movielens(p) => write!(f, "movielens:{}", p.display()),
            Dataset::Tsv(p) => write!(f, "tsv:{}", p.display()),
            Dataset::Synth => f.write_str("synth"),
        }
    }
}

impl FromStr for Dataset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            Some(("movielens", p)) => Ok(Dataset::Movielens(p.into())),
            Some(("tsv", p)) => Ok(Dataset::Tsv(p.into())),
            None if s == "synth" => Ok(Dataset::Synth),
            _ => Err("expected movielens:<path>, tsv:<path> or synth".into()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Base,
    Kd,
    Ips,
    Causald,
    CausaldNoFda,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Base => "base",
            Method::Kd => "kd",
            Method::Ips => "ips",
            Method::Causald => "causald",
            Method::CausaldNoFda => "causald-no-fda",
        })
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "base" => Method::Base,
            "kd" => Method::Kd,
            "ips" => Method::Ips,
            "causald" => Method::Causald,
            "causald-no-fda" => Method::CausaldNoFda,
            _ => return Err("expected base, kd, ips, causald or causald-no-fda".into()),
        })
    }
}

/// User attribute used to partition users.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Attribute {
    Activeness,
    HistoryPopularity,
    BehaviorConsistency,
    Random,
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Attribute::Activeness => "activeness",
            Attribute::HistoryPopularity => "history_popularity",
            Attribute::BehaviorConsistency => "behavior_consistency",
            Attribute::Random => "random",
        })
    }
}

impl FromStr for Attribute {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "activeness" => Attribute::Activeness,
            "history_popularity" => Attribute::HistoryPopularity,
            "behavior_consistency" => Attribute::BehaviorConsistency,
            "random" => Attribute::Random,
            _ => {
                return Err(
                    "expected activeness, history_popularity, behavior_consistency or random"
                        .into(),
                )
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: Dataset,
    pub k_core: u32,
    pub synth: ScmConfig,
    pub arch: Arch,
    pub method: Method,
    pub embed_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub n_neg: u32,
    pub l2: f64,
    pub teachers: usize,
    pub lambda_bda: f64,
    pub lambda_fda: f64,
    pub feature_mode: FeatureMode,
    pub head_hidden: usize,
    pub split_attribute: Attribute,
    pub kd_weight: f64,
    pub kd_temperature: f64,
    pub ips_clip: f64,
    pub eval_attribute: Attribute,
    pub eval_groups: usize,
    pub output: PathBuf,
    /// Seeds the split, synthetic generation and random groups.
    pub data_seed: u64,
    /// Training master seed.
    pub seed: u64,
    pub seeds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: Dataset::Synth,
            k_core: 16,
            synth: ScmConfig::new(2000, 500),
            arch: Arch::Din,
            method: Method::Base,
            embed_dim: 8,
            epochs: 5,
            batch_size: 4096,
            learning_rate: 0.01,
            n_neg: 1,
            l2: 1e-6,
            teachers: 4,
            lambda_bda: 1.0,
            lambda_fda: 1.0,
            feature_mode: FeatureMode::Bda,
            head_hidden: 16,
            split_attribute: Attribute::Activeness,
            kd_weight: 1.0,
            kd_temperature: 1.0,
            ips_clip: 0.1,
            eval_attribute: Attribute::Activeness,
            eval_groups: 5,
            output: PathBuf::from("causald-out"),
            data_seed: 0,
            seed: 0,
            seeds: 1,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.to_string(),
        reason: e.to_string(),
    })
}

impl RunConfig {
    /// Sets one key. Keys use underscores; dashes are accepted as well.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let key = key.replace('-', "_");
        let k = key.as_str();
        let v = value.trim();
        match k {
            "dataset" => self.dataset = parse(k, v)?,
            "k_core" => self.k_core = parse(k, v)?,
            "synth_users" => self.synth.n_users = parse(k, v)?,
            "synth_items" => {
                self.synth.n_items = parse(k, v)?;
                self.synth.popularity_scores = causald_core::synth::linear_popularity(self.synth.n_items);
            }
            "synth_latent_dim" => self.synth.latent_dim = parse(k, v)?,
            "synth_prior" => self.synth.confounder_prior = parse(k, v)?,
            "synth_beta" => self.synth.confounder_strength = parse(k, v)?,
            "synth_history_len" => self.synth.history_len = parse(k, v)?,
            "synth_train_events" => self.synth.train_events = parse(k, v)?,
            "synth_test_events" => self.synth.test_events = parse(k, v)?,
            "synth_match_scale" => self.synth.match_scale = parse(k, v)?,
            "synth_match_bias" => self.synth.match_bias = parse(k, v)?,
            "arch" => self.arch = parse(k, v)?,
            "method" => self.method = parse(k, v)?,
            "embed_dim" => self.embed_dim = parse(k, v)?,
            "epochs" => self.epochs = parse(k, v)?,
            "batch_size" => self.batch_size = parse(k, v)?,
            "learning_rate" => self.learning_rate = parse(k, v)?,
            "n_neg" => self.n_neg = parse(k, v)?,
            "l2" => self.l2 = parse(k, v)?,
            "teachers" => self.teachers = parse(k, v)?,
            "lambda_bda" => self.lambda_bda = parse(k, v)?,
            "lambda_fda" => self.lambda_fda = parse(k, v)?,
            "feature_mode" => self.feature_mode = parse(k, v)?,
            "head_hidden" => self.head_hidden = parse(k, v)?,
            "split_attribute" => self.split_attribute = parse(k, v)?,
            "kd_weight" => self.kd_weight = parse(k, v)?,
            "kd_temperature" => self.kd_temperature = parse(k, v)?,
            "ips_clip" => self.ips_clip = parse(k, v)?,
            "eval_attribute" => self.eval_attribute = parse(k, v)?,
            "eval_groups" => self.eval_groups = parse(k, v)?,
            "output" => self.output = PathBuf::from(v),
            "data_seed" => self.data_seed = parse(k, v)?,
            "seed" => self.seed = parse(k, v)?,
            "seeds" => self.seeds = parse(k, v)?,
            _ => return Err(ConfigError::UnknownKey(key)),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let s = &self.synth;
        vec![
            ("dataset", self.dataset.to_string()),
            ("k_core", self.k_core.to_string()),
            ("synth_users", s.n_users.to_string()),
            ("synth_items", s.n_items.to_string()),
            ("synth_latent_dim", s.latent_dim.to_string()),
            ("synth_prior", s.confounder_prior.to_string()),
            ("synth_beta", s.confounder_strength.to_string()),
            ("synth_history_len", s.history_len.to_string()),
            ("synth_train_events", s.train_events.to_string()),
            ("synth_test_events", s.test_events.to_string()),
            ("synth_match_scale", s.match_scale.to_string()),
            ("synth_match_bias", s.match_bias.to_string()),
            ("arch", self.arch.to_string()),
            ("method", self.method.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("n_neg", self.n_neg.to_string()),
            ("l2", self.l2.to_string()),
            ("teachers", self.teachers.to_string()),
            ("lambda_bda", self.lambda_bda.to_string()),
            ("lambda_fda", self.lambda_fda.to_string()),
            ("feature_mode", self.feature_mode.to_string()),
            ("head_hidden", self.head_hidden.to_string()),
            ("split_attribute", self.split_attribute.to_string()),
            ("kd_weight", self.kd_weight.to_string()),
            ("kd_temperature", self.kd_temperature.to_string()),
            ("ips_clip", self.ips_clip.to_string()),
            ("eval_attribute", self.eval_attribute.to_string()),
            ("eval_groups", self.eval_groups.to_string()),
            ("output", self.output.display().to_string()),
            ("data_seed", self.data_seed.to_string()),
            ("seed", self.seed.to_string()),
            ("seeds", self.seeds.to_string()),
        ]
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: n + 1 })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut c = RunConfig::default();
        c.apply_text(&text)?;
        Ok(c)
    }

    /// The resolved configuration as text that [`RunConfig::apply_text`]
    /// reads back unchanged.
    pub fn snapshot(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            out += &format!("{k} = {v}\n");
        }
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.teachers == 0 {
            return bad("teachers must be at least 1");
        }
        if !(self.lambda_bda >= 0.0 && self.lambda_fda >= 0.0) {
            return bad("lambda weights must be non-negative");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.embed_dim == 0 {
            return bad("epochs, batch_size and embed_dim must be positive");
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return bad("learning_rate must be positive");
        }
        if !(self.ips_clip > 0.0 && self.ips_clip <= 1.0) {
            return bad("ips_clip must lie in (0, 1]");
        }
        if self.eval_groups < 2 {
            return bad("eval_groups must be at least 2");
        }
        if self.seeds == 0 {
            return bad("seeds must be at least 1");
        }
        if self.dataset == Dataset::Synth {
            self.synth
                .validate()
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        Ok(())
    }

    /// Keys that determine the prepared dataset.
    pub fn data_entries(&self) -> Vec<(&'static str, String)> {
        self.entries()
            .into_iter()
            .filter(|(k, _)| {
                matches!(*k, "dataset" | "k_core" | "data_seed" | "split_attribute" | "teachers" | "eval_attribute" | "eval_groups")
                    || k.starts_with("synth_")
            })
            .collect()
    }

    /// Master seed of run `i` in a sweep.
    pub fn run_seed(&self, i: usize) -> u64 {
        self.seed.wrapping_add(i as u64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_round_trips() {
        let mut c = RunConfig::default();
        c.apply_text("method = causald\nteachers = 8 # comment\nlambda-fda = 0.1\ndataset = tsv:/tmp/x.tsv\n")
            .unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&c.snapshot()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.teachers, 8);
        assert_eq!(back.method, Method::Causald);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut c = RunConfig::default();
        assert!(matches!(c.apply_text("lamda_fda = 1"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(c.apply_text("teachers 4"), Err(ConfigError::Syntax { line: 1 })));
        assert!(matches!(c.apply_text("teachers = four"), Err(ConfigError::Value { .. })));
    }
}
