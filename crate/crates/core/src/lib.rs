//! Dual event/time Transformer for sparse, irregularly sampled multivariate
//! event streams: data handling, binning, the model, masked self-supervised
//! pretraining, fine-tuning, evaluation and synthetic benchmarks.

pub mod bench;
pub mod binning;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dataset;
pub mod embedding;
mod error;
pub mod finetune;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod ssl;
pub mod synth;

pub use error::{Error, Result};
