//! Experiment runner: config parsing, dataset construction, orchestration
//! and metrics/plot-table emission.

mod config;
mod metrics;
mod toy;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::adapter::AdapterParams;
use crate::encoder::{load_embeddings, make_prototypes, ClassPrototypes, EncoderError};
use crate::federation::{partition_long_tail, prepare_clients, run_simulation, ClientState, FederationError, SimulationResult};
use crate::qlora::{Payload, QloraError, WireMessage};
use crate::rng::{self, stream};

pub use config::{AdapterSection, DatasetKind, DatasetSection, RunConfig, TrainSection};
pub use metrics::{export_plot_data, metrics_stream, timing_stream, Entry, PlotTables};
pub use toy::{make_raw_toy, make_toy_dataset, nearest_centroid_accuracy, stratified_split, Split, ToyDatasetSpec};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Dataset(#[from] EncoderError),
    #[error("federation: {0}")]
    Federation(#[from] FederationError),
    #[error("qlora: {0}")]
    Qlora(#[from] QloraError),
    #[error("metrics: {0}")]
    Metrics(String),
    #[error("i/o on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            _ => 2,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Parser)]
#[command(name = "fedadapter", about = "Federated adapter fine-tuning simulator", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a simulation; flags override values from the config file.
    Run {
        /// TOML config; every key is optional (defaults: 100 rounds, 5 clients,
        /// 8-class toy data, 4-bit rank-4 uploads, GAN on).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        clients: Option<usize>,
        /// Upload bit width (4 or 8).
        #[arg(long)]
        bits: Option<u8>,
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long, value_enum)]
        gan: Option<Switch>,
        /// `toy` or `embeddings:<path>`.
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Client worker threads (0 = one per core).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Turn a metrics stream into CSV tables.
    ExportPlots {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode an upload payload and print its contents.
    InspectDelta { payload: PathBuf },
}

/// Flag values layered over a file config.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub rounds: Option<usize>,
    pub clients: Option<usize>,
    pub bits: Option<u8>,
    pub rank: Option<usize>,
    pub gan: Option<Switch>,
    pub dataset: Option<String>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<(), CliError> {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.rounds {
            cfg.rounds = v;
        }
        if let Some(v) = self.clients {
            cfg.n_clients = v;
        }
        if let Some(v) = self.bits {
            if !matches!(v, 4 | 8) {
                return Err(CliError::Config(format!("--bits {v} out of range: expected lora.bits ∈ {{4,8}}")));
            }
            cfg.lora.bits = v;
        }
        if let Some(v) = self.rank {
            cfg.lora.rank = v;
        }
        if let Some(v) = self.gan {
            cfg.gan.enabled = v == Switch::On;
        }
        if let Some(v) = &self.dataset {
            if v == "toy" {
                cfg.dataset.kind = DatasetKind::Toy;
            } else if let Some(p) = v.strip_prefix("embeddings:") {
                cfg.dataset.kind = DatasetKind::Embeddings;
                cfg.dataset.path = Some(PathBuf::from(p));
            } else {
                return Err(CliError::Config(format!("--dataset {v:?}: expected toy or embeddings:<path>")));
            }
        }
        if let Some(v) = &self.out {
            cfg.out_path = v.clone();
        }
        if let Some(v) = self.threads {
            cfg.threads = v;
        }
        cfg.validate()
    }
}

/// Resolves the effective config: file (or defaults), then flags.
pub fn parse_config(file: Option<&Path>, overrides: &Overrides) -> Result<RunConfig, CliError> {
    let mut cfg = match file {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    overrides.apply(&mut cfg)?;
    Ok(cfg)
}

/// Train/test data and prototypes for a config.
pub fn build_data(cfg: &RunConfig) -> Result<(Split, ClassPrototypes), CliError> {
    let seed = cfg.dataset.seed.unwrap_or(cfg.seed);
    let split = match cfg.dataset.kind {
        DatasetKind::Toy => make_toy_dataset(
            &ToyDatasetSpec {
                num_classes: cfg.dataset.num_classes,
                samples_per_class: cfg.dataset.samples_per_class,
                raw_dim: cfg.dataset.raw_dim,
                cluster_spread: cfg.dataset.cluster_spread,
                seed,
            },
            cfg.adapter.dim,
        )?,
        DatasetKind::Embeddings => {
            let path = cfg.dataset.path.as_deref().ok_or_else(|| CliError::Config("dataset.path missing".into()))?;
            let data = load_embeddings(path)?;
            if data.dim() != cfg.adapter.dim {
                return Err(CliError::Config(format!(
                    "adapter.dim = {} but {} holds {}-wide embeddings",
                    cfg.adapter.dim,
                    path.display(),
                    data.dim()
                )));
            }
            stratified_split(&data, seed)
        }
    };
    let protos = make_prototypes(split.train.num_classes(), cfg.adapter.dim, cfg.seed)?;
    Ok((split, protos))
}

pub struct RunOutput {
    pub result: SimulationResult,
    pub clients: Vec<ClientState>,
    pub class_counts: Vec<usize>,
    pub metrics: String,
    pub timing: String,
}

/// Builds data, partitions it, augments each client and simulates.
pub fn execute(cfg: &RunConfig) -> Result<RunOutput, CliError> {
    cfg.validate()?;
    let (split, protos) = build_data(cfg)?;
    let mut prng = rng::derive(cfg.seed, stream::PARTITION, &[]);
    let partition =
        partition_long_tail(&split.train, cfg.n_clients, cfg.dirichlet_alpha, cfg.imbalance_factor, &mut prng)?;
    let fed = cfg.federation_config();
    let gan = cfg.gan.enabled.then_some(&cfg.gan);
    let mut clients = prepare_clients(partition.clients, gan, cfg.seed, fed.train.weight_real_only, cfg.threads)?;
    let global = AdapterParams::init(&fed.adapter, cfg.seed);
    let result = run_simulation(global, &mut clients, &protos, &split.test, &fed, cfg.rounds)?;
    let metrics = metrics_stream(&result, &clients, &partition.class_counts)?;
    let timing = timing_stream(&result)?;
    Ok(RunOutput { result, clients, class_counts: partition.class_counts, metrics, timing })
}

/// Executes and writes `metrics.jsonl`, `timing.jsonl` and `config.toml`
/// into `cfg.out_path`.
pub fn run(cfg: &RunConfig) -> Result<RunOutput, CliError> {
    let out = execute(cfg)?;
    let dir = &cfg.out_path;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (name, text) in [("metrics.jsonl", &out.metrics), ("timing.jsonl", &out.timing), ("config.toml", &cfg.to_toml())] {
        let p = dir.join(name);
        fs::write(&p, text).map_err(io_err(&p))?;
    }
    Ok(out)
}

/// Human-readable listing of a wire payload.
pub fn inspect_delta(bytes: &[u8]) -> Result<String, CliError> {
    let msg = WireMessage::decode(bytes)?;
    let mut s = format!(
        "precision: {}-bit\nblock_size: {}\ntensors: {}\nbytes: {}\n",
        msg.precision.bits(),
        msg.block_size,
        msg.tensors.len(),
        bytes.len()
    );
    for t in &msg.tensors {
        let values = t.payload.values()?;
        let absmax = values.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        let kind = match &t.payload {
            Payload::Quantized(_) => "quantized",
            Payload::Raw(_) => "raw",
        };
        let form = if t.rank == 0 { "dense".to_string() } else { format!("rank {}", t.rank) };
        s.push_str(&format!(
            "  {:<6} {}x{} {form} {kind} values={} absmax={absmax:.6}\n",
            t.name,
            t.rows,
            t.cols,
            values.len()
        ));
    }
    Ok(s)
}

fn dispatch(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Run { config, seed, rounds, clients, bits, rank, gan, dataset, out, threads } => {
            let ov = Overrides { seed, rounds, clients, bits, rank, gan, dataset, out, threads };
            let cfg = parse_config(config.as_deref(), &ov)?;
            let o = run(&cfg)?;
            let s = &o.result.summary;
            Ok(format!(
                "rounds: {}\nfinal accuracy: {:.4}\nuplink bytes: {}\ndownlink bytes: {}\nmetrics: {}\n",
                s.rounds_completed,
                s.final_accuracy,
                s.cumulative_bytes_up,
                s.cumulative_bytes_down,
                cfg.out_path.join("metrics.jsonl").display()
            ))
        }
        Command::ExportPlots { input, out } => {
            let text = fs::read_to_string(&input).map_err(io_err(&input))?;
            let tables = export_plot_data(&text)?;
            tables.write_to(&out)?;
            Ok(format!("wrote {} tables to {}\n", PlotTables::NAMES.len(), out.display()))
        }
        Command::InspectDelta { payload } => {
            let bytes = fs::read(&payload).map_err(io_err(&payload))?;
            inspect_delta(&bytes)
        }
    }
}

/// Parses `args` and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
