use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::adapter::AdapterConfig;
use crate::federation::{FederationConfig, LoraConfig, TrainConfig};
use crate::gan::{GanConfig, TargetRule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterSection {
    pub dim: usize,
    pub d_ff: usize,
    pub init_scale: Option<f64>,
    pub logit_bits: u8,
    pub logit_block_size: usize,
}

impl Default for AdapterSection {
    fn default() -> Self {
        let a = AdapterConfig::default();
        Self {
            dim: a.dim,
            d_ff: a.d_ff,
            init_scale: a.init_scale,
            logit_bits: a.logit_bits,
            logit_block_size: a.logit_block_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub local_epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub sym_text_loss: bool,
    pub quantize_logits: bool,
    pub eval_batch: usize,
    pub weight_real_only: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        let a = AdapterConfig::default();
        Self {
            local_epochs: t.local_epochs,
            batch: t.batch,
            lr: t.lr,
            sym_text_loss: a.sym_text_loss,
            quantize_logits: a.quantize_logits,
            eval_batch: t.eval_batch,
            weight_real_only: t.weight_real_only,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Toy,
    Embeddings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub raw_dim: usize,
    pub cluster_spread: f64,
    /// Dataset seed; the run seed when absent.
    pub seed: Option<u64>,
    /// FTEM file for `kind = "embeddings"`.
    pub path: Option<PathBuf>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Toy,
            num_classes: 8,
            samples_per_class: 500,
            raw_dim: 16,
            cluster_spread: 0.1,
            seed: None,
            path: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub rounds: usize,
    pub n_clients: usize,
    pub dirichlet_alpha: f64,
    pub imbalance_factor: f64,
    pub participation: f64,
    pub threads: usize,
    pub target_accuracy: Option<f64>,
    pub out_path: PathBuf,
    pub adapter: AdapterSection,
    pub lora: LoraConfig,
    pub gan: GanConfig,
    pub train: TrainSection,
    pub dataset: DatasetSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            rounds: 100,
            n_clients: 5,
            dirichlet_alpha: 0.5,
            imbalance_factor: 10.0,
            participation: 1.0,
            threads: 1,
            target_accuracy: None,
            out_path: PathBuf::from("runs/latest"),
            adapter: AdapterSection::default(),
            lora: LoraConfig::default(),
            gan: GanConfig::default(),
            train: TrainSection::default(),
            dataset: DatasetSection::default(),
        }
    }
}

fn range(key: &str, rule: &str) -> CliError {
    CliError::Config(format!("{key} out of range: expected {key} ∈ {rule}"))
}

impl RunConfig {
    /// Parses TOML text; unknown keys and type errors name the key and position.
    pub fn from_toml(text: &str, origin: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(format!("{origin}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: cannot read config: {e}", path.display())))?;
        Self::from_toml(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_default()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.n_clients == 0 {
            return Err(range("n_clients", "[1, ∞)"));
        }
        if !(self.dirichlet_alpha.is_finite() && self.dirichlet_alpha > 0.0) {
            return Err(range("dirichlet_alpha", "(0, ∞)"));
        }
        if !(self.imbalance_factor.is_finite() && self.imbalance_factor >= 1.0) {
            return Err(range("imbalance_factor", "[1, ∞)"));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(range("participation", "(0, 1]"));
        }
        if let Some(t) = self.target_accuracy {
            if !(0.0..=1.0).contains(&t) {
                return Err(range("target_accuracy", "[0, 1]"));
            }
        }
        let a = &self.adapter;
        if a.dim == 0 {
            return Err(range("adapter.dim", "[1, ∞)"));
        }
        if a.d_ff == 0 {
            return Err(range("adapter.d_ff", "[1, ∞)"));
        }
        if a.init_scale.is_some_and(|s| !(s.is_finite() && s > 0.0)) {
            return Err(range("adapter.init_scale", "(0, ∞)"));
        }
        if !matches!(a.logit_bits, 4 | 8) {
            return Err(range("adapter.logit_bits", "{4,8}"));
        }
        if a.logit_block_size == 0 {
            return Err(range("adapter.logit_block_size", "[1, ∞)"));
        }
        let l = &self.lora;
        if !matches!(l.bits, 4 | 8 | 32) {
            return Err(CliError::Config(format!(
                "lora.bits = {} out of range: expected lora.bits ∈ {{4,8}} (32 disables quantization)",
                l.bits
            )));
        }
        if l.rank == 0 {
            return Err(range("lora.rank", "[1, ∞)"));
        }
        if !(l.alpha().is_finite() && l.alpha() > 0.0) {
            return Err(range("lora.alpha", "(0, ∞)"));
        }
        if l.block_size == 0 {
            return Err(range("lora.block_size", "[1, ∞)"));
        }
        let g = &self.gan;
        if g.batch == 0 {
            return Err(range("gan.batch", "[1, ∞)"));
        }
        if g.z_dim == 0 {
            return Err(range("gan.z_dim", "[1, ∞)"));
        }
        if g.k_disc == 0 {
            return Err(range("gan.k_disc", "[1, ∞)"));
        }
        if !(g.lr.is_finite() && g.lr > 0.0) {
            return Err(range("gan.lr", "(0, ∞)"));
        }
        if !(0.0..1.0).contains(&g.beta1) {
            return Err(range("gan.beta1", "[0, 1)"));
        }
        if !(0.0..1.0).contains(&g.beta2) {
            return Err(range("gan.beta2", "[0, 1)"));
        }
        if !(g.cap > 0.0 && g.cap <= 1.0) {
            return Err(range("gan.cap", "(0, 1]"));
        }
        if g.hidden.contains(&0) {
            return Err(range("gan.hidden", "positive widths"));
        }
        if g.policy == TargetRule::Fixed(0) {
            return Err(range("gan.policy.fixed", "[1, ∞)"));
        }
        let t = &self.train;
        if t.batch == 0 {
            return Err(range("train.batch", "[1, ∞)"));
        }
        if t.eval_batch == 0 {
            return Err(range("train.eval_batch", "[1, ∞)"));
        }
        if !(t.lr.is_finite() && t.lr > 0.0) {
            return Err(range("train.lr", "(0, ∞)"));
        }
        let d = &self.dataset;
        match d.kind {
            DatasetKind::Toy => {
                if d.num_classes < 2 {
                    return Err(range("dataset.num_classes", "[2, ∞)"));
                }
                if d.samples_per_class < 5 {
                    return Err(range("dataset.samples_per_class", "[5, ∞)"));
                }
                if d.raw_dim < d.num_classes {
                    return Err(range("dataset.raw_dim", "[dataset.num_classes, ∞)"));
                }
                if !(d.cluster_spread.is_finite() && d.cluster_spread >= 0.0) {
                    return Err(range("dataset.cluster_spread", "[0, ∞)"));
                }
            }
            DatasetKind::Embeddings => {
                if d.path.is_none() {
                    return Err(CliError::Config("dataset.path is required when dataset.kind = \"embeddings\"".into()));
                }
            }
        }
        Ok(())
    }

    pub fn adapter_config(&self) -> AdapterConfig {
        AdapterConfig {
            dim: self.adapter.dim,
            d_ff: self.adapter.d_ff,
            init_scale: self.adapter.init_scale,
            quantize_logits: self.train.quantize_logits,
            logit_bits: self.adapter.logit_bits,
            logit_block_size: self.adapter.logit_block_size,
            sym_text_loss: self.train.sym_text_loss,
        }
    }

    pub fn federation_config(&self) -> FederationConfig {
        FederationConfig {
            seed: self.seed,
            adapter: self.adapter_config(),
            lora: self.lora.clone(),
            train: TrainConfig {
                local_epochs: self.train.local_epochs,
                batch: self.train.batch,
                lr: self.train.lr,
                eval_batch: self.train.eval_batch,
                weight_real_only: self.train.weight_real_only,
            },
            participation: self.participation,
            threads: self.threads,
            target_accuracy: self.target_accuracy,
        }
    }
}
