//! `causald` command-line driver.

mod config;
mod evaluate;
mod prepare;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use causald_core::data::DataError;
use causald_core::distill::DistillError;
use causald_core::eval::EvalError;
use causald_core::models::ModelError;
use causald_core::synth::SynthError;
use clap::{Args, Parser, Subcommand};

use config::{ConfigError, RunConfig};

#[derive(Parser)]
#[command(name = "causald", version, about = "Causal multi-teacher distillation for recommenders")]
struct Cli {
    /// Caps worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse, filter, split and group a dataset.
    Prepare(Common),
    /// Train the configured method for every seed.
    Train(Common),
    /// Score checkpoints and write metrics.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint files or run directories; defaults to the configured runs.
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        /// Also run the group-wise protocol and report heterogeneity.
        #[arg(long)]
        groupwise: bool,
        /// A second checkpoint set to t-test against.
        #[arg(long = "compare")]
        compare: Vec<PathBuf>,
    },
    /// Train one model per evaluation group and score it on that group.
    Groupwise(Common),
    /// Aggregate evaluated runs per method.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Overrides any key, e.g. `--set lambda_fda=0.1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    teachers: Option<String>,
    #[arg(long)]
    lambda_bda: Option<String>,
    #[arg(long)]
    lambda_fda: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    learning_rate: Option<String>,
    #[arg(long)]
    split_attribute: Option<String>,
    #[arg(long)]
    eval_attribute: Option<String>,
    #[arg(long)]
    output: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    seeds: Option<String>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, ConfigError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        let flags = [
            ("dataset", &self.dataset),
            ("arch", &self.arch),
            ("method", &self.method),
            ("teachers", &self.teachers),
            ("lambda_bda", &self.lambda_bda),
            ("lambda_fda", &self.lambda_fda),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("learning_rate", &self.learning_rate),
            ("split_attribute", &self.split_attribute),
            ("eval_attribute", &self.eval_attribute),
            ("output", &self.output),
            ("seed", &self.seed),
            ("seeds", &self.seeds),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, v)?;
            }
        }
        for kv in &self.sets {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| ConfigError::Invalid(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(j) = cli.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(j).build_global()?;
    }
    match cli.command {
        Command::Prepare(c) => {
            prepare::prepare(&c.resolve()?)?;
        }
        Command::Train(c) => {
            train::cmd_train(&c.resolve()?)?;
        }
        Command::Evaluate {
            common,
            checkpoints,
            groupwise,
            compare,
        } => evaluate::cmd_evaluate(&common.resolve()?, &checkpoints, groupwise, &compare)?,
        Command::Groupwise(c) => evaluate::cmd_groupwise(&c.resolve()?)?,
        Command::Report(c) => {
            evaluate::cmd_report(&c.resolve()?)?;
        }
    }
    Ok(())
}

fn model_code(e: &ModelError) -> u8 {
    match e {
        ModelError::Diverged { .. } => 4,
        ModelError::Data(_) | ModelError::Io { .. } | ModelError::Checkpoint(_) | ModelError::Header(_) => 3,
        ModelError::Tensor(_) => 1,
        ModelError::Invalid(_) => 2,
    }
}

/// Maps the first recognised error in the chain to an exit code: 2 for
/// configuration, 3 for data, 4 for divergence.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() || cause.is::<SynthError>() {
            return 2;
        }
        if cause.is::<DataError>() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<ModelError>() {
            return model_code(e);
        }
        if let Some(e) = cause.downcast_ref::<DistillError>() {
            return match e {
                DistillError::Model(m) => model_code(m),
                DistillError::Invalid(_) => 2,
                _ => 3,
            };
        }
        if let Some(e) = cause.downcast_ref::<EvalError>() {
            return match e {
                EvalError::Model(m) => model_code(m),
                EvalError::Tensor(_) => 1,
                _ => 3,
            };
        }
    }
    1
}

/// The error chain on one line, skipping causes already quoted by their
/// parent.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out += ": ";
            }
            out += &text;
        }
    }
    out
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
