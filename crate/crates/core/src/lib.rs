//! Causal multi-teacher distillation for sequential recommenders.
//!
//! A student recommender is trained against labels produced by a front-door
//! adjusted ensemble of heterogeneous teachers, plus an optional back-door
//! adjusted feature target. The crate also carries the data pipeline, two
//! encoder-predictor base models, KD/IPS baselines, ranking and
//! heterogeneity metrics, and a synthetic confounded data generator with an
//! exact interventional oracle.

pub mod data;
pub mod distill;
pub mod eval;
pub mod models;
pub mod seed;
pub mod synth;
pub mod tensor;

pub use tensor::{Graph, NodeId, ParamStore, Tensor, TensorError};
