//! Encoder-predictor recommenders.
//!
//! The encoder maps a history (and, for DeepFM-lite, the user) to a mediator
//! vector; the predictor maps the mediator and the target item embedding to
//! a click probability.

mod batch;
mod train;

pub use batch::Batch;
pub use train::{
    fit, train_base, Component, EpochLog, ExtraTerms, NoExtra, Objective, TrainConfig,
};

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DataError;
use crate::tensor::{read_container, write_container, CheckpointError, ParamId};
use crate::{Graph, NodeId, ParamStore, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("training diverged at epoch {epoch}, step {step}: {source}")]
    Diverged {
        epoch: usize,
        step: usize,
        source: TensorError,
    },
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("bad model header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Din,
    DeepFm,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Din => "din",
            Arch::DeepFm => "deepfm",
        })
    }
}

impl FromStr for Arch {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "din" => Ok(Arch::Din),
            "deepfm" => Ok(Arch::DeepFm),
            other => Err(format!("unknown architecture {other:?} (expected din or deepfm)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub n_users: usize,
    pub n_items: usize,
    pub embed_dim: usize,
    pub attention_hidden: usize,
    pub predictor_hidden: Vec<usize>,
}

impl ModelConfig {
    pub fn new(arch: Arch, n_users: usize, n_items: usize) -> Self {
        ModelConfig {
            arch,
            n_users,
            n_items,
            embed_dim: 8,
            attention_hidden: 16,
            predictor_hidden: vec![32, 16],
        }
    }

    pub fn mediator_dim(&self) -> usize {
        match self.arch {
            Arch::Din => self.embed_dim,
            Arch::DeepFm => 2 * self.embed_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    w: ParamId,
    b: ParamId,
}

/// A DIN-lite or DeepFM-lite model with its parameters.
#[derive(Debug, Clone)]
pub struct RecModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    item_emb: ParamId,
    user_emb: Option<ParamId>,
    attention: Vec<Layer>,
    predictor: Vec<Layer>,
}

impl PartialEq for RecModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.store == other.store
    }
}

/// Graph handles produced by [`RecModel::forward`].
#[derive(Debug, Clone)]
pub struct Forward {
    pub mediator: NodeId,
    pub target_emb: NodeId,
    pub logit: NodeId,
    pub prob: NodeId,
    /// DIN attention weights, `[B, width]`.
    pub attention: Option<NodeId>,
    /// Embedding-table nodes, for the L2 penalty.
    pub tables: Vec<NodeId>,
    /// Every parameter node by name.
    pub params: Vec<(String, NodeId)>,
}

struct Bound {
    item_emb: NodeId,
    user_emb: Option<NodeId>,
    attention: Vec<(NodeId, NodeId)>,
    predictor: Vec<(NodeId, NodeId)>,
    named: Vec<(String, NodeId)>,
}

impl RecModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        if config.n_items == 0 || config.embed_dim == 0 {
            return Err(ModelError::Invalid("model needs items and a positive embedding size".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.embed_dim;
        let item_emb = store.add_uniform("item_emb", &[config.n_items, d], &mut rng);
        let user_emb = match config.arch {
            Arch::DeepFm => Some(store.add_uniform("user_emb", &[config.n_users.max(1), d], &mut rng)),
            Arch::Din => None,
        };
        let mut layer = |store: &mut ParamStore, name: String, fan_in: usize, fan_out: usize| Layer {
            w: store.add_uniform(&format!("{name}.w"), &[fan_in, fan_out], &mut rng),
            b: store.add_uniform(&format!("{name}.b"), &[fan_out], &mut rng),
        };
        let attention = match config.arch {
            Arch::Din => vec![
                layer(&mut store, "att.0".into(), 3 * d, config.attention_hidden),
                layer(&mut store, "att.1".into(), config.attention_hidden, 1),
            ],
            Arch::DeepFm => Vec::new(),
        };
        let mut predictor = Vec::new();
        let mut fan_in = config.mediator_dim() + d;
        for (k, &h) in config.predictor_hidden.iter().enumerate() {
            predictor.push(layer(&mut store, format!("pred.{k}"), fan_in, h));
            fan_in = h;
        }
        predictor.push(layer(&mut store, format!("pred.{}", config.predictor_hidden.len()), fan_in, 1));
        Ok(RecModel {
            config,
            store,
            item_emb,
            user_emb,
            attention,
            predictor,
        })
    }

    fn bind(&self, g: &mut Graph) -> Bound {
        let mut named = Vec::new();
        let mut p = |g: &mut Graph, id: ParamId| {
            let node = g.param(&self.store, id);
            let name = self.store.iter().nth(id.index()).map(|(n, _)| n.to_string());
            named.push((name.unwrap_or_default(), node));
            node
        };
        let item_emb = p(g, self.item_emb);
        let user_emb = self.user_emb.map(|u| p(g, u));
        let attention = self.attention.iter().map(|l| (p(g, l.w), p(g, l.b))).collect();
        let predictor = self.predictor.iter().map(|l| (p(g, l.w), p(g, l.b))).collect();
        Bound {
            item_emb,
            user_emb,
            attention,
            predictor,
            named,
        }
    }

    fn mlp(
        g: &mut Graph,
        mut x: NodeId,
        layers: &[(NodeId, NodeId)],
    ) -> Result<NodeId, TensorError> {
        for (k, &(w, b)) in layers.iter().enumerate() {
            x = g.linear(x, w, b)?;
            if k + 1 < layers.len() {
                x = g.relu(x)?;
            }
        }
        Ok(x)
    }

    fn encode_bound(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &Batch,
    ) -> Result<(NodeId, NodeId, Option<NodeId>), TensorError> {
        let target = g.gather(p.item_emb, batch.targets.clone())?;
        let hist = g.gather(p.item_emb, batch.history.clone())?;
        let (mediator, attention) = match self.config.arch {
            Arch::Din => {
                let t_rep = g.gather(target, batch.row_of_slot())?;
                let inter = g.mul(hist, t_rep)?;
                let feats = g.concat(&[hist, t_rep, inter])?;
                let logits = Self::mlp(g, feats, &p.attention)?;
                let logits = g.reshape(logits, &[batch.len(), batch.width])?;
                let weights = g.masked_softmax(logits, batch.lengths.clone())?;
                (g.weighted_pool(weights, hist, batch.lengths.clone())?, Some(weights))
            }
            Arch::DeepFm => {
                let users = p.user_emb.expect("deepfm has a user table");
                let u = g.gather(users, batch.user_index())?;
                let pooled = g.mean_pool(hist, batch.lengths.clone())?;
                (g.concat(&[u, pooled])?, None)
            }
        };
        Ok((mediator, target, attention))
    }

    fn predict_bound(
        &self,
        g: &mut Graph,
        p: &Bound,
        mediator: NodeId,
        target: NodeId,
    ) -> Result<NodeId, TensorError> {
        let x = g.concat(&[mediator, target])?;
        let deep = Self::mlp(g, x, &p.predictor)?;
        match self.config.arch {
            Arch::Din => Ok(deep),
            Arch::DeepFm => {
                let d = self.config.embed_dim;
                let u = g.slice_cols(mediator, 0, d)?;
                let h = g.slice_cols(mediator, d, 2 * d)?;
                let fm = fm_pairwise(g, &[u, h, target])?;
                g.add(deep, fm)
            }
        }
    }

    /// Builds encoder and predictor for `batch` inside `g`.
    pub fn forward(&self, g: &mut Graph, batch: &Batch) -> Result<Forward, TensorError> {
        let p = self.bind(g);
        let (mediator, target_emb, attention) = self.encode_bound(g, &p, batch)?;
        let logit = self.predict_bound(g, &p, mediator, target_emb)?;
        let prob = g.sigmoid(logit)?;
        let mut tables = vec![p.item_emb];
        tables.extend(p.user_emb);
        Ok(Forward {
            mediator,
            target_emb,
            logit,
            prob,
            attention,
            tables,
            params: p.named,
        })
    }

    /// Predictor applied to an arbitrary mediator node; returns the
    /// probability node.
    pub fn predict(&self, g: &mut Graph, mediator: NodeId, target_emb: NodeId) -> Result<NodeId, TensorError> {
        let p = self.bind(g);
        let logit = self.predict_bound(g, &p, mediator, target_emb)?;
        g.sigmoid(logit)
    }

    /// Mean BCE against the batch labels, optionally weighted per row, plus
    /// `l2 * ||E||^2` over the embedding tables.
    pub fn rec_loss(
        &self,
        g: &mut Graph,
        fwd: &Forward,
        batch: &Batch,
        weights: Option<std::sync::Arc<[f64]>>,
        l2: f64,
    ) -> Result<NodeId, TensorError> {
        let labels = g.constant(Tensor::column(batch.labels.clone()));
        let mut loss = g.bce(fwd.prob, labels, weights)?;
        for &t in &fwd.tables {
            let sq = g.sum_squares(t)?;
            let pen = g.scale(sq, l2)?;
            loss = g.add(loss, pen)?;
        }
        Ok(loss)
    }

    /// Click probabilities for every row of `batch`.
    pub fn score(&self, batch: &Batch) -> Result<Vec<f64>, TensorError> {
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, batch)?;
        Ok(g.value(fwd.prob).data().to_vec())
    }

    /// Mediator rows and target embeddings for `batch`, without building
    /// the predictor.
    pub fn encode(&self, batch: &Batch) -> Result<(Tensor, Tensor), TensorError> {
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let (m, t, _) = self.encode_bound(&mut g, &p, batch)?;
        Ok((g.value(m).clone(), g.value(t).clone()))
    }

    /// Writes the parameters to `path` and the configuration to the JSON
    /// header next to it.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let io = |source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        };
        write_container(BufWriter::new(File::create(path).map_err(io)?), &self.store.to_named())?;
        let header = header_path(path);
        let file = File::create(&header).map_err(|source| ModelError::Io {
            path: header.clone(),
            source,
        })?;
        serde_json::to_writer_pretty(BufWriter::new(file), &self.config)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let header = header_path(path);
        let file = File::open(&header).map_err(|source| ModelError::Io {
            path: header.clone(),
            source,
        })?;
        let config: ModelConfig = serde_json::from_reader(BufReader::new(file))?;
        let mut model = RecModel::new(config, 0)?;
        let file = File::open(path).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let entries = read_container(BufReader::new(file))?;
        model.store.load_named(entries).map_err(ModelError::Invalid)?;
        Ok(model)
    }
}

/// `model.cdtn` -> `model.json`.
pub fn header_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Second-order FM term `sum_{i<j} <e_i, e_j>` over `[B, d]` field
/// embeddings, as `0.5 * (||sum e||^2 - sum ||e||^2)` per row.
pub fn fm_pairwise(g: &mut Graph, fields: &[NodeId]) -> Result<NodeId, TensorError> {
    let mut total = fields[0];
    for &f in &fields[1..] {
        total = g.add(total, f)?;
    }
    let sq_total = g.mul(total, total)?;
    let mut sum_sq = g.mul(fields[0], fields[0])?;
    for &f in &fields[1..] {
        let sq = g.mul(f, f)?;
        sum_sq = g.add(sum_sq, sq)?;
    }
    let diff = g.sub(sq_total, sum_sq)?;
    let rows = g.row_sum(diff)?;
    g.scale(rows, 0.5)
}
