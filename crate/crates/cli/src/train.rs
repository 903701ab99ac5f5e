//! `train`: one checkpoint per seed for the configured method.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use causald_core::data::split_non_iid;
use causald_core::distill::baselines::{train_ips, train_kd_baseline, IpsWeights, KdConfig};
use causald_core::distill::{train_causald, train_teachers, write_training_log, DistillConfig};
use causald_core::models::{train_base, EpochLog, ModelConfig, RecModel, TrainConfig};
use causald_core::tensor::write_container;

use crate::config::{Method, RunConfig};
use crate::prepare::{load, Prepared};

pub fn model_config(cfg: &RunConfig, data: &Prepared) -> ModelConfig {
    let mut m = ModelConfig::new(cfg.arch, data.train.n_users, data.train.n_items);
    m.embed_dim = cfg.embed_dim;
    m
}

/// Synthetic events carry their own labels, so no negatives are sampled.
pub fn train_config(cfg: &RunConfig, data: &Prepared) -> TrainConfig {
    TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        n_neg: if data.scm.is_some() { 0 } else { cfg.n_neg },
        l2: cfg.l2,
    }
}

pub fn distill_config(cfg: &RunConfig) -> DistillConfig {
    DistillConfig {
        teachers: cfg.teachers,
        lambda_bda: cfg.lambda_bda,
        lambda_fda: match cfg.method {
            Method::CausaldNoFda => 0.0,
            _ => cfg.lambda_fda,
        },
        mode: cfg.feature_mode,
        head_hidden: cfg.head_hidden,
    }
}

pub fn run_dir(cfg: &RunConfig, method: Method, master: u64) -> PathBuf {
    cfg.output.join("runs").join(format!("{method}-seed{master}"))
}

fn log_epochs(tag: &str, logs: &[EpochLog]) {
    for l in logs {
        log::info!(
            "{tag} epoch {} rec={:.5} bda={:.5} distill={:.5} consistency={:.5} wall={:.2}s",
            l.epoch,
            l.rec,
            l.bda,
            l.distill,
            l.consistency,
            l.wall_seconds
        );
    }
}

fn train_one(cfg: &RunConfig, data: &Prepared, master: u64, dir: &Path) -> Result<RecModel> {
    let mcfg = model_config(cfg, data);
    let tcfg = train_config(cfg, data);
    let tag = format!("{}-seed{master}", cfg.method);
    let (model, logs) = match cfg.method {
        Method::Base => train_base(mcfg, &data.train, &tcfg, master)?,
        Method::Kd => {
            let kd = KdConfig {
                weight: cfg.kd_weight,
                temperature: cfg.kd_temperature,
            };
            train_kd_baseline(mcfg, &data.train, &tcfg, kd, master)?
        }
        Method::Ips => {
            let w = IpsWeights::new(&data.train, &data.split_groups, cfg.ips_clip)?;
            train_ips(mcfg, &data.train, &w, &tcfg, master)?
        }
        Method::Causald | Method::CausaldNoFda => {
            let dcfg = distill_config(cfg);
            let subsets = split_non_iid(&data.train, &data.split_groups);
            let start = Instant::now();
            let teachers = train_teachers(
                &subsets,
                &data.split_groups.attribute,
                &mcfg,
                &tcfg,
                master,
            )?;
            log::info!(
                "{tag} trained {} teachers in {:.2}s",
                teachers.len(),
                start.elapsed().as_secs_f64()
            );
            let manifest = teachers.save(&dir.join("ensemble"))?;
            log::info!("{tag} ensemble manifest {}", manifest.display());
            let (student, head, logs) =
                train_causald(mcfg, &data.train, &teachers, &tcfg, &dcfg, master)?;
            let path = dir.join("fda_head.cdtn");
            let f = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            write_container(std::io::BufWriter::new(f), &head.named())?;
            (student, logs)
        }
    };
    log_epochs(&tag, &logs);
    write_training_log(&dir.join("training_log.csv"), &logs)?;
    Ok(model)
}

/// Trains `seeds` runs with masters `seed, seed + 1, ...` and returns the
/// checkpoint paths.
pub fn cmd_train(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let data = load(cfg)?;
    let mut out = Vec::new();
    for i in 0..cfg.seeds {
        let master = cfg.run_seed(i);
        let dir = run_dir(cfg, cfg.method, master);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut snapshot = cfg.clone();
        snapshot.seed = master;
        snapshot.seeds = 1;
        let model = train_one(cfg, &data, master, &dir)?;
        let path = dir.join("model.cdtn");
        model.save(&path)?;
        fs::write(dir.join("resolved.conf"), snapshot.snapshot())?;
        log::info!("wrote {}", path.display());
        out.push(path);
    }
    Ok(out)
}
