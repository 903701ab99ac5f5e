//! `evaluate`, `groupwise` and `report`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use causald_core::eval::{
    evaluate, evaluate_scm, groupwise_protocol, t_test_two_sided, MetricRow, MetricsReport,
    WelchTest,
};
use causald_core::models::RecModel;
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, RunConfig};
use crate::prepare::{load, Prepared};
use crate::train::{model_config, run_dir, train_config};

/// Checkpoints named on the command line, or every run of the configured
/// method and seeds.
pub fn resolve_checkpoints(cfg: &RunConfig, given: &[PathBuf]) -> Vec<PathBuf> {
    if !given.is_empty() {
        return given
            .iter()
            .map(|p| if p.is_dir() { p.join("model.cdtn") } else { p.clone() })
            .collect();
    }
    (0..cfg.seeds)
        .map(|i| run_dir(cfg, cfg.method, cfg.run_seed(i)).join("model.cdtn"))
        .collect()
}

/// The configuration a checkpoint was trained with, from its snapshot.
fn run_config(checkpoint: &Path) -> Result<RunConfig> {
    let snap = checkpoint.with_file_name("resolved.conf");
    Ok(RunConfig::from_file(&snap)?)
}

fn groupwise_path(cfg: &RunConfig, master: u64) -> PathBuf {
    cfg.output
        .join("groupwise")
        .join(format!("{}-{}-seed{master}.json", cfg.arch, cfg.eval_attribute))
}

#[derive(Debug, Serialize, Deserialize)]
struct GroupwiseFile {
    attribute: String,
    seed: u64,
    groups: Vec<MetricRow>,
}

/// Group-wise scores for `master`, computed once and cached.
fn groupwise_scores(cfg: &RunConfig, data: &Prepared, master: u64) -> Result<Vec<MetricRow>> {
    if data.scm.is_some() {
        return Err(ConfigError::Invalid("the group-wise protocol needs ranking data".into()).into());
    }
    let path = groupwise_path(cfg, master);
    if let Ok(text) = fs::read_to_string(&path) {
        let f: GroupwiseFile = serde_json::from_str(&text)?;
        if f.attribute == data.eval_groups.attribute && f.seed == master {
            log::info!("group-wise scores in {} are up to date", path.display());
            return Ok(f.groups);
        }
    }
    let groups = groupwise_protocol(
        &data.train,
        &data.test,
        &data.eval_groups,
        &model_config(cfg, data),
        &train_config(cfg, data),
        master,
    )?;
    fs::create_dir_all(path.parent().expect("groupwise path has a parent"))?;
    let file = GroupwiseFile {
        attribute: data.eval_groups.attribute.clone(),
        seed: master,
        groups,
    };
    fs::write(&path, serde_json::to_string_pretty(&file)? + "\n")?;
    fs::write(path.with_extension("conf"), cfg.snapshot())?;
    log::info!("wrote {}", path.display());
    Ok(file.groups)
}

pub fn cmd_groupwise(cfg: &RunConfig) -> Result<()> {
    let data = load(cfg)?;
    for i in 0..cfg.seeds {
        let master = cfg.run_seed(i);
        for (g, row) in groupwise_scores(cfg, &data, master)?.iter().enumerate() {
            log::info!("seed {master} group {g} auc={:.4} ndcg@10={:.4}", row[0], row[4]);
        }
    }
    Ok(())
}

fn load_model(path: &Path, data: &Prepared) -> Result<RecModel> {
    let model = RecModel::load(path).with_context(|| format!("loading {}", path.display()))?;
    if model.config.n_users != data.train.n_users || model.config.n_items != data.train.n_items {
        bail!(ConfigError::Invalid(format!(
            "{} was trained on {} users and {} items, the prepared data has {} and {}",
            path.display(),
            model.config.n_users,
            model.config.n_items,
            data.train.n_users,
            data.train.n_items
        )));
    }
    Ok(model)
}

fn score(model: &RecModel, data: &Prepared, tag: &str, seed: u64) -> Result<MetricsReport> {
    match &data.scm {
        None => Ok(evaluate(model, &data.test, Some(&data.eval_groups), tag, seed)?),
        Some(ds) => {
            let s = evaluate_scm(model, ds)?;
            let overall = [("auc_u0", s.auc_u0), ("auc_u1", s.auc_u1), ("auc_spread", s.auc_spread)]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect();
            Ok(MetricsReport {
                model: tag.to_string(),
                seed,
                overall,
                attribute: None,
                groups: Vec::new(),
                heterogeneity: BTreeMap::new(),
                heterogeneity_mean: None,
                heterogeneity_normalized: None,
                groupwise: Vec::new(),
                oracle_gap: Some(s.oracle_gap),
                instances: Vec::new(),
            })
        }
    }
}

/// Scores every checkpoint and writes `metrics.json`, `metrics.csv` and
/// `instances.csv` next to it.
fn evaluate_set(
    cfg: &RunConfig,
    data: &Prepared,
    checkpoints: &[PathBuf],
    groupwise: bool,
) -> Result<Vec<MetricsReport>> {
    let mut reports = Vec::new();
    for path in checkpoints {
        let run = run_config(path)?;
        if run.arch != cfg.arch {
            bail!(ConfigError::Invalid(format!(
                "{} is a {} checkpoint but arch = {}",
                path.display(),
                run.arch,
                cfg.arch
            )));
        }
        let model = load_model(path, data)?;
        let mut report = score(&model, data, &run.method.to_string(), run.seed)?;
        if groupwise {
            report.attach_groupwise(&groupwise_scores(cfg, data, run.seed)?)?;
        }
        let dir = path.parent().unwrap_or(Path::new("."));
        report.write_json(&dir.join("metrics.json"))?;
        report.write_csv(&dir.join("metrics.csv"))?;
        if data.scm.is_none() {
            report.write_instance_csv(&dir.join("instances.csv"), Some(&data.eval_groups))?;
        }
        let summary: Vec<String> = report.overall.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
        log::info!("{} {}", path.display(), summary.join(" "));
        if let Some(gap) = report.oracle_gap {
            log::info!("{} oracle_gap={gap:.4}", path.display());
        }
        if let Some(h) = report.heterogeneity_mean {
            log::info!("{} heterogeneity={h:.4}", path.display());
        }
        reports.push(report);
    }
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub metric: String,
    pub mean_a: f64,
    pub mean_b: f64,
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

fn metric_values(reports: &[MetricsReport], metric: &str) -> Vec<f64> {
    reports
        .iter()
        .filter_map(|r| match metric {
            "oracle_gap" => r.oracle_gap,
            "heterogeneity" => r.heterogeneity_mean,
            _ => r.overall.get(metric).copied(),
        })
        .collect()
}

fn metric_names(reports: &[MetricsReport]) -> Vec<String> {
    let mut names: Vec<String> = match reports.first() {
        Some(r) => r.overall.keys().cloned().collect(),
        None => Vec::new(),
    };
    if reports.iter().all(|r| r.oracle_gap.is_some()) && !reports.is_empty() {
        names.push("oracle_gap".into());
    }
    if reports.iter().all(|r| r.heterogeneity_mean.is_some()) && !reports.is_empty() {
        names.push("heterogeneity".into());
    }
    names
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Two-sided Welch tests of every shared metric.
pub fn compare(a: &[MetricsReport], b: &[MetricsReport]) -> Result<Vec<Comparison>> {
    let mut out = Vec::new();
    for m in metric_names(a) {
        let (xa, xb) = (metric_values(a, &m), metric_values(b, &m));
        if xb.len() != b.len() {
            continue;
        }
        let WelchTest { t, df, p } = t_test_two_sided(&xa, &xb)
            .with_context(|| format!("comparing {m}"))?;
        out.push(Comparison {
            metric: m,
            mean_a: mean(&xa),
            mean_b: mean(&xb),
            t,
            df,
            p,
        });
    }
    Ok(out)
}

pub fn cmd_evaluate(
    cfg: &RunConfig,
    checkpoints: &[PathBuf],
    groupwise: bool,
    compare_with: &[PathBuf],
) -> Result<()> {
    let data = load(cfg)?;
    let set = resolve_checkpoints(cfg, checkpoints);
    let reports = evaluate_set(cfg, &data, &set, groupwise)?;
    if !compare_with.is_empty() {
        let other = resolve_checkpoints(cfg, compare_with);
        let other_reports = evaluate_set(cfg, &data, &other, groupwise)?;
        let rows = compare(&reports, &other_reports)?;
        let path = cfg.output.join("compare.json");
        fs::create_dir_all(&cfg.output)?;
        fs::write(&path, serde_json::to_string_pretty(&rows)? + "\n")?;
        for r in &rows {
            log::info!(
                "{}: {:.4} vs {:.4} t={:.3} df={:.2} p={:.4}",
                r.metric,
                r.mean_a,
                r.mean_b,
                r.t,
                r.df,
                r.p
            );
        }
        log::info!("wrote {}", path.display());
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub runs: usize,
    pub mean: BTreeMap<String, f64>,
    pub std: BTreeMap<String, f64>,
    /// Welch tests against `base`, when base runs exist.
    pub vs_base: Vec<Comparison>,
}

fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    causald_core::eval::sample_std(xs)
}

/// Aggregates every `runs/*/metrics.json` under the output directory.
pub fn cmd_report(cfg: &RunConfig) -> Result<Vec<MethodSummary>> {
    let runs = cfg.output.join("runs");
    let mut by_method: BTreeMap<String, Vec<MetricsReport>> = BTreeMap::new();
    let mut dirs: Vec<PathBuf> = fs::read_dir(&runs)
        .with_context(|| format!("reading {}", runs.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    dirs.sort();
    for dir in dirs {
        let path = dir.join("metrics.json");
        let Ok(text) = fs::read_to_string(&path) else {
            continue;
        };
        let r: MetricsReport =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        by_method.entry(r.model.clone()).or_default().push(r);
    }
    if by_method.is_empty() {
        bail!(ConfigError::Invalid(format!(
            "no evaluated runs under {}; run `causald evaluate` first",
            runs.display()
        )));
    }
    let base = by_method.get("base").cloned();
    let mut out = Vec::new();
    let mut csv = String::from("method,metric,runs,mean,std,p_vs_base\n");
    for (method, reports) in &by_method {
        let names = metric_names(reports);
        let vs_base = match &base {
            Some(b) if method != "base" && b.len() >= 2 && reports.len() >= 2 => {
                compare(reports, b).unwrap_or_else(|e| {
                    log::warn!("{method} vs base: {e:#}");
                    Vec::new()
                })
            }
            _ => Vec::new(),
        };
        let mut s = MethodSummary {
            method: method.clone(),
            runs: reports.len(),
            mean: BTreeMap::new(),
            std: BTreeMap::new(),
            vs_base,
        };
        for m in names {
            let xs = metric_values(reports, &m);
            let p = s.vs_base.iter().find(|c| c.metric == m).map_or(String::new(), |c| c.p.to_string());
            csv += &format!("{method},{m},{},{},{},{p}\n", xs.len(), mean(&xs), std_dev(&xs));
            log::info!("{method} {m} {:.4} ± {:.4} ({} runs)", mean(&xs), std_dev(&xs), xs.len());
            s.mean.insert(m.clone(), mean(&xs));
            s.std.insert(m, std_dev(&xs));
        }
        out.push(s);
    }
    fs::write(cfg.output.join("report.json"), serde_json::to_string_pretty(&out)? + "\n")?;
    fs::write(cfg.output.join("report.csv"), csv)?;
    fs::write(cfg.output.join("report.conf"), cfg.snapshot())?;
    Ok(out)
}
