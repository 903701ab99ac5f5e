//! `prepare`: canonical dataset, split and user groupings on disk.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use causald_core::data::{
    activeness_groups, behavior_consistency, history_popularity, k_core_filter, leave_last_out,
    load_dataset, parse_movielens, parse_tsv, quantile_groups, random_groups, read_group_sidecar,
    save_dataset, write_group_sidecar, DataError, EvalInstance, GroupAssignment, InteractionLog,
    TrainSet, UserSequence,
};
use causald_core::seed;
use causald_core::synth::{generate, ScmConfig, ScmDataset};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{Attribute, Dataset, RunConfig};

/// Popularity clusters for behavior consistency.
const POP_CLUSTERS: usize = 18;
const KL_EPS: f64 = 1e-6;
const FORMAT: &str = "causald-prepared-1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedManifest {
    pub format: String,
    pub hash: String,
    pub dataset: String,
    pub raw_users: usize,
    pub raw_items: usize,
    pub raw_interactions: usize,
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub split_attribute: String,
    pub eval_attribute: String,
}

/// Everything downstream commands read from the prepared directory.
pub struct Prepared {
    pub train: TrainSet,
    /// Ranking instances; empty for synthetic data.
    pub test: Vec<EvalInstance>,
    pub scm: Option<ScmDataset>,
    /// Teacher subsets and IPS groups.
    pub split_groups: GroupAssignment,
    pub eval_groups: GroupAssignment,
}

pub fn prepared_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output.join("prepared")
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn input_hash(cfg: &RunConfig) -> Result<String> {
    let mut h = Sha256::new();
    h.update(FORMAT.as_bytes());
    for (k, v) in cfg.data_entries() {
        h.update(format!("{k}={v}\n").as_bytes());
    }
    match &cfg.dataset {
        Dataset::Movielens(p) | Dataset::Tsv(p) => {
            let bytes = fs::read(p).map_err(|source| DataError::Io {
                path: p.clone(),
                source,
            })?;
            h.update(&bytes);
        }
        Dataset::Synth => h.update(serde_json::to_vec(&cfg.synth)?),
    }
    Ok(hex(&h.finalize()))
}

fn read_manifest(dir: &Path) -> Option<PreparedManifest> {
    let text = fs::read_to_string(dir.join("manifest.json")).ok()?;
    serde_json::from_str(&text).ok()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Training histories as sequences, for behavior consistency.
fn train_sequences(train: &TrainSet) -> Vec<UserSequence> {
    train
        .histories
        .iter()
        .enumerate()
        .map(|(u, h)| UserSequence {
            user: u as u32,
            items: h.clone(),
            timestamps: (0..h.len() as i64).collect(),
        })
        .collect()
}

pub fn assign_groups(
    attribute: Attribute,
    train: &TrainSet,
    n_groups: usize,
    master: u64,
) -> Result<GroupAssignment, DataError> {
    match attribute {
        Attribute::Activeness => activeness_groups(&train.activeness_counts(), n_groups),
        Attribute::HistoryPopularity => {
            quantile_groups("history_popularity", &history_popularity(train), n_groups)
        }
        Attribute::BehaviorConsistency => {
            let kl = behavior_consistency(&train_sequences(train), POP_CLUSTERS, KL_EPS);
            quantile_groups("behavior_consistency", &kl, n_groups)
        }
        Attribute::Random => {
            random_groups(train.n_users, n_groups, seed::derive(master, "groups"))
        }
    }
}

fn split(log: &InteractionLog, master: u64) -> Result<(TrainSet, Vec<EvalInstance>), DataError> {
    leave_last_out(&log.sequences(), log.n_items(), seed::derive(master, "split"))
}

fn scm_config(cfg: &RunConfig) -> ScmConfig {
    let mut s = cfg.synth.clone();
    s.seed = seed::derive(cfg.data_seed, "synth");
    s
}

/// Runs the preparation pipeline unless the outputs already match the
/// configuration. Returns the manifest.
pub fn prepare(cfg: &RunConfig) -> Result<PreparedManifest> {
    let dir = prepared_dir(cfg);
    let hash = input_hash(cfg)?;
    if let Some(m) = read_manifest(&dir) {
        if m.hash == hash && m.format == FORMAT {
            log::info!("prepared dataset in {} is up to date", dir.display());
            return Ok(m);
        }
    }
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;

    let (raw, filtered, train) = match &cfg.dataset {
        Dataset::Synth => {
            let scm = scm_config(cfg);
            let ds = generate(&scm)?;
            write_json(&dir.join("scm_config.json"), &scm)?;
            write_json(&dir.join("scm_truth.json"), &ds.truth())?;
            let log = ds.log();
            (log.clone(), log, ds.train_set())
        }
        Dataset::Movielens(p) | Dataset::Tsv(p) => {
            let raw = match &cfg.dataset {
                Dataset::Movielens(_) => parse_movielens(p),
                _ => parse_tsv(p),
            }
            .with_context(|| format!("parsing {}", p.display()))?;
            let filtered = k_core_filter(&raw, cfg.k_core)?;
            let (train, _) = split(&filtered, cfg.data_seed)?;
            (raw, filtered, train)
        }
    };
    save_dataset(&dir.join("dataset.cdtn"), &filtered)?;
    let split_groups = assign_groups(cfg.split_attribute, &train, cfg.teachers, cfg.data_seed)?;
    let eval_groups = assign_groups(cfg.eval_attribute, &train, cfg.eval_groups, cfg.data_seed)?;
    write_group_sidecar(&dir.join("groups_split.jsonl"), &split_groups)?;
    write_group_sidecar(&dir.join("groups_eval.jsonl"), &eval_groups)?;

    let manifest = PreparedManifest {
        format: FORMAT.into(),
        hash,
        dataset: cfg.dataset.to_string(),
        raw_users: raw.n_users(),
        raw_items: raw.n_items(),
        raw_interactions: raw.len(),
        users: filtered.n_users(),
        items: filtered.n_items(),
        interactions: filtered.len(),
        split_attribute: cfg.split_attribute.to_string(),
        eval_attribute: cfg.eval_attribute.to_string(),
    };
    let stats = format!(
        "pre-filter users={} items={} interactions={}\n\
         post-filter users={} items={} interactions={}\n\
         train pairs={}\n",
        manifest.raw_users,
        manifest.raw_items,
        manifest.raw_interactions,
        manifest.users,
        manifest.items,
        manifest.interactions,
        train.pairs.len(),
    );
    for line in stats.lines() {
        log::info!("{line}");
    }
    fs::write(dir.join("stats.txt"), &stats)?;
    fs::write(dir.join("resolved.conf"), cfg.snapshot())?;
    // Written last so an interrupted run is never mistaken for a finished one.
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Loads prepared artifacts, refusing stale or missing ones.
pub fn load(cfg: &RunConfig) -> Result<Prepared> {
    let dir = prepared_dir(cfg);
    let hash = input_hash(cfg)?;
    match read_manifest(&dir) {
        Some(m) if m.hash == hash && m.format == FORMAT => {}
        _ => {
            return Err(DataError::Invalid(format!(
                "no up-to-date prepared dataset in {}; run `causald prepare` first",
                dir.display()
            ))
            .into())
        }
    }
    let split_groups = read_group_sidecar(&dir.join("groups_split.jsonl"))?;
    let eval_groups = read_group_sidecar(&dir.join("groups_eval.jsonl"))?;
    let (train, test, scm) = match cfg.dataset {
        Dataset::Synth => {
            let ds = generate(&scm_config(cfg))?;
            (ds.train_set(), Vec::new(), Some(ds))
        }
        _ => {
            let log = load_dataset(&dir.join("dataset.cdtn"))?;
            let (train, test) = split(&log, cfg.data_seed)?;
            (train, test, None)
        }
    };
    Ok(Prepared {
        train,
        test,
        scm,
        split_groups,
        eval_groups,
    })
}
