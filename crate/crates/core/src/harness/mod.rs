//! Datasets, training, evaluation and benchmarking.

pub mod ablation;
pub mod bench;
pub mod config;
pub mod dataset;
pub mod metrics;
pub mod optim;
pub mod split;
pub mod synthetic;
pub mod train;

use thiserror::Error;

use crate::attention::ModelError;
use crate::checkpoint::CheckpointError;
use crate::distill::DistillError;
use crate::embedding::EmbeddingError;
use crate::teacher::TraceError;
use crate::tensor::TensorError;

pub use dataset::{load_dataset, Dataset, DatasetError, DatasetReader, DatasetRecord, Schema, SkippedRow};
pub use metrics::{Metrics, Normalizer};
pub use split::{random_split, Split};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("checkpoint vocabulary does not fit its token table ({vocab} symbols, {rows} rows)")]
    VocabMismatch { vocab: usize, rows: usize },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("JSON: {0}")]
    Json(#[from] serde_json::Error),
}
