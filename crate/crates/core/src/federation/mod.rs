//! Federated protocol: long-tail partitioning, local low-rank training,
//! quantized uploads, weighted aggregation and byte accounting.

mod client;
mod partition;
mod server;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{AdapterConfig, AdapterError};
use crate::encoder::EncoderError;
use crate::gan::GanError;
use crate::qlora::{Precision, QloraError};
use crate::tensor::TensorError;

pub use client::{client_update, effective_params, prepare_clients, ClientState, ClientUpload};
pub use partition::{long_tail_counts, partition_long_tail, LongTailPartition};
pub use server::{
    aggregate, broadcast_len, evaluate, run_round, run_simulation, upload_len, ClientReport, EvalResult,
    RoundReport, ServerState, SimulationResult, Summary,
};

#[derive(Debug, Error)]
pub enum FederationError {
    #[error("invalid federation config: {0}")]
    Config(String),
    #[error("partition failed after {attempts} dirichlet draws: {detail}")]
    Partition { client: usize, attempts: usize, detail: String },
    #[error("client {client} has no local data")]
    EmptyClient { client: usize },
    #[error("client {client}: upload could not be decoded: {source}")]
    Decode { client: usize, source: QloraError },
    #[error("sample counts sum to zero")]
    ZeroWeight,
    #[error("no uploads to aggregate")]
    NoUploads,
    #[error("evaluation set is empty")]
    EmptyTestSet,
    #[error("thread pool: {0}")]
    ThreadPool(String),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Qlora(#[from] QloraError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Gan(#[from] GanError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    /// Defaults to `rank`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f32>,
    /// 4 or 8; 32 sends raw f32 factors.
    pub bits: u8,
    pub block_size: usize,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 4, alpha: None, bits: 4, block_size: 64 }
    }
}

impl LoraConfig {
    pub fn alpha(&self) -> f32 {
        self.alpha.unwrap_or(self.rank as f32)
    }

    pub fn precision(&self) -> Result<Precision, FederationError> {
        Precision::from_bits(self.bits)
            .map_err(|_| FederationError::Config(format!("lora.bits must be 4, 8 or 32, got {}", self.bits)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub local_epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub eval_batch: usize,
    /// Aggregation weight counts real samples only.
    pub weight_real_only: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { local_epochs: 1, batch: 32, lr: 2e-3, eval_batch: 256, weight_real_only: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    pub seed: u64,
    pub adapter: AdapterConfig,
    pub lora: LoraConfig,
    pub train: TrainConfig,
    /// Fraction of clients sampled each round.
    pub participation: f64,
    /// Worker threads for client updates; 0 uses the rayon default.
    pub threads: usize,
    /// Stop once server accuracy reaches this value.
    pub target_accuracy: Option<f64>,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            adapter: AdapterConfig::default(),
            lora: LoraConfig::default(),
            train: TrainConfig::default(),
            participation: 1.0,
            threads: 1,
            target_accuracy: None,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<(), FederationError> {
        self.adapter.validate()?;
        self.lora.precision()?;
        let bad = |m: &str| Err(FederationError::Config(m.into()));
        if self.lora.rank == 0 {
            return bad("lora.rank must be positive");
        }
        if !(self.lora.alpha().is_finite() && self.lora.alpha() > 0.0) {
            return bad("lora.alpha must be positive");
        }
        if self.lora.block_size == 0 {
            return bad("lora.block_size must be positive");
        }
        if self.train.batch == 0 || self.train.eval_batch == 0 {
            return bad("train.batch and train.eval_batch must be positive");
        }
        if !(self.train.lr.is_finite() && self.train.lr > 0.0) {
            return bad("train.lr must be positive");
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return bad("participation must lie in (0, 1]");
        }
        Ok(())
    }
}
