use std::time::Instant;

use rand::seq::index;
use rayon::prelude::*;
use rayon::ThreadPool;
use serde::Serialize;

use super::client::{client_update, ClientState, ClientUpload};
use super::{FederationConfig, FederationError};
use crate::adapter::{predict_logits, AdapterConfig, AdapterParams, ParamKind, PARAM_LAYOUT};
use crate::encoder::{ClassPrototypes, EmbeddingDataset};
use crate::qlora::{decode_delta, wire_len, DeltaTensor, LowRankDelta, Precision};
use crate::rng::{self, stream};
use crate::tensor::{cross_entropy, Matrix};

pub(super) fn build_pool(threads: usize) -> Result<ThreadPool, FederationError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| FederationError::ThreadPool(e.to_string()))
}

fn layout_shapes(adapter: &AdapterConfig) -> [(usize, usize); 10] {
    let (d, f) = (adapter.dim, adapter.d_ff);
    [(d, d), (d, d), (d, d), (d, f), (1, f), (f, d), (1, d), (d, d), (1, d), (1, 1)]
}

/// Closed-form size of the dense 32-bit model broadcast.
pub fn broadcast_len(adapter: &AdapterConfig) -> usize {
    let tensors: Vec<(usize, usize)> =
        PARAM_LAYOUT.iter().zip(layout_shapes(adapter)).map(|((n, _), (r, c))| (n.len(), r * c)).collect();
    wire_len(Precision::F32, 0, &tensors)
}

/// Closed-form size of one client upload: `rank * (rows + cols)` values per
/// factored matrix (rank clamped to the shape) and every dense tensor in full.
pub fn upload_len(adapter: &AdapterConfig, rank: usize, precision: Precision, block_size: usize) -> usize {
    let tensors: Vec<(usize, usize)> = PARAM_LAYOUT
        .iter()
        .zip(layout_shapes(adapter))
        .map(|(&(n, kind), (r, c))| {
            let numel = match kind {
                ParamKind::Matrix => LowRankDelta::effective_rank(r, c, rank) * (r + c),
                ParamKind::Dense => r * c,
            };
            (n.len(), numel)
        })
        .collect();
    wire_len(precision, block_size, &tensors)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub loss: f64,
    pub per_class_recall: Vec<f64>,
    pub per_class_support: Vec<usize>,
}

/// Unquantized logits over fixed batches in dataset order. Classes absent
/// from `test` report recall 0 with support 0.
pub fn evaluate(
    params: &AdapterParams,
    test: &EmbeddingDataset,
    protos: &ClassPrototypes,
    eval_batch: usize,
) -> Result<EvalResult, FederationError> {
    if test.is_empty() {
        return Err(FederationError::EmptyTestSet);
    }
    let classes = test.num_classes();
    let mut hits = vec![0usize; classes];
    let mut support = vec![0usize; classes];
    let mut loss_sum = 0.0;
    let idx: Vec<usize> = (0..test.len()).collect();
    for chunk in idx.chunks(eval_batch.max(1)) {
        let x = test.features().select_rows(chunk);
        let labels: Vec<usize> = chunk.iter().map(|&i| test.labels()[i]).collect();
        let lg = predict_logits(params, &x, protos, None)?;
        loss_sum += cross_entropy(&lg, &labels)? as f64 * chunk.len() as f64;
        for (pred, &l) in lg.argmax_rows().into_iter().zip(&labels) {
            support[l] += 1;
            if pred == l {
                hits[l] += 1;
            }
        }
    }
    let correct: usize = hits.iter().sum();
    let per_class_recall =
        hits.iter().zip(&support).map(|(&h, &s)| if s == 0 { 0.0 } else { h as f64 / s as f64 }).collect();
    Ok(EvalResult {
        accuracy: correct as f64 / test.len() as f64,
        loss: loss_sum / test.len() as f64,
        per_class_recall,
        per_class_support: support,
    })
}

/// `global + Σ_i (m_i / Σ m_j) · delta_i`, summed in ascending client id in
/// 64-bit and rounded once per element.
pub fn aggregate(
    global: &AdapterParams,
    uploads: &[(usize, &[u8], usize)],
    alpha: f32,
) -> Result<AdapterParams, FederationError> {
    if uploads.is_empty() {
        return Err(FederationError::NoUploads);
    }
    let mut order: Vec<&(usize, &[u8], usize)> = uploads.iter().collect();
    order.sort_by_key(|u| u.0);
    let total: u64 = order.iter().map(|u| u.2 as u64).sum();
    if total == 0 {
        return Err(FederationError::ZeroWeight);
    }
    let mut acc: Vec<Vec<f64>> = global.tensors().iter().map(|m| vec![0.0; m.len()]).collect();
    for &&(client, bytes, m) in &order {
        let delta = decode_delta(bytes, alpha).map_err(|source| FederationError::Decode { client, source })?;
        let w = m as f64 / total as f64;
        for e in &delta.entries {
            let slot = PARAM_LAYOUT.iter().position(|(n, _)| *n == e.name).ok_or_else(|| {
                FederationError::Decode { client, source: crate::qlora::QloraError::UnknownTensor(e.name.clone()) }
            })?;
            let target = global.tensors()[slot];
            if e.tensor.target_shape() != target.shape() {
                return Err(FederationError::Decode {
                    client,
                    source: crate::qlora::QloraError::TensorShape {
                        name: e.name.clone(),
                        detail: format!("upload shape {:?} vs model {:?}", e.tensor.target_shape(), target.shape()),
                    },
                });
            }
            let dense: Matrix<f64> = match &e.tensor {
                DeltaTensor::LowRank { a, b } => {
                    let s = alpha as f64 / a.cols() as f64;
                    a.cast::<f64>().matmul(&b.cast())?.scale(s)
                }
                DeltaTensor::Dense(d) => d.cast(),
            };
            for (dst, v) in acc[slot].iter_mut().zip(dense.data()) {
                *dst += w * v;
            }
        }
    }
    let mut out = global.clone();
    for (m, a) in out.tensors_mut().into_iter().zip(&acc) {
        for (dst, &d) in m.data_mut().iter_mut().zip(a) {
            *dst = (*dst as f64 + d) as f32;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClientReport {
    pub id: usize,
    pub m: usize,
    pub train_loss: f64,
    pub local_accuracy: f64,
    pub bytes_up: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoundReport {
    pub round: usize,
    pub clients: Vec<ClientReport>,
    /// `m`-weighted mean of client train losses.
    pub train_loss: f64,
    pub server_accuracy: f64,
    pub server_loss: f64,
    pub per_class_recall: Vec<f64>,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub cumulative_bytes_up: u64,
    pub cumulative_bytes_down: u64,
    /// Wall-clock time; excluded from serialized metrics.
    #[serde(skip)]
    pub duration_secs: f64,
}

#[derive(Clone, Debug)]
pub struct ServerState {
    pub global: AdapterParams,
    /// Rounds completed so far.
    pub round: usize,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub history: Vec<RoundReport>,
}

impl ServerState {
    pub fn new(global: AdapterParams) -> Self {
        Self { global, round: 0, bytes_up: 0, bytes_down: 0, history: Vec::new() }
    }
}

fn participants(n: usize, cfg: &FederationConfig, round: usize) -> Vec<usize> {
    if cfg.participation >= 1.0 {
        return (0..n).collect();
    }
    let k = ((cfg.participation * n as f64).ceil() as usize).clamp(1, n);
    let mut r = rng::derive(cfg.seed, stream::PARTICIPATION, &[round as u64]);
    let mut chosen = index::sample(&mut r, n, k).into_vec();
    chosen.sort_unstable();
    chosen
}

/// Broadcast, parallel local training, aggregation and evaluation.
pub fn run_round(
    server: &mut ServerState,
    clients: &mut [ClientState],
    protos: &ClassPrototypes,
    test: &EmbeddingDataset,
    cfg: &FederationConfig,
    pool: &ThreadPool,
) -> Result<RoundReport, FederationError> {
    let start = Instant::now();
    let round = server.round;
    let chosen = participants(clients.len(), cfg, round);
    let global = &server.global;
    let results: Vec<Option<Result<ClientUpload, FederationError>>> = pool.install(|| {
        clients
            .par_iter_mut()
            .enumerate()
            .map(|(i, c)| chosen.binary_search(&i).is_ok().then(|| client_update(c, global, protos, cfg, round)))
            .collect()
    });
    let uploads: Vec<ClientUpload> = results.into_iter().flatten().collect::<Result<_, _>>()?;

    let bytes_down = (chosen.len() * broadcast_len(&cfg.adapter)) as u64;
    let bytes_up: u64 = uploads.iter().map(|u| u.bytes.len() as u64).sum();
    let triples: Vec<(usize, &[u8], usize)> = uploads.iter().map(|u| (u.id, u.bytes.as_slice(), u.m)).collect();
    server.global = aggregate(&server.global, &triples, cfg.lora.alpha())?;
    let eval = evaluate(&server.global, test, protos, cfg.train.eval_batch)?;

    let m_total: f64 = uploads.iter().map(|u| u.m as f64).sum();
    let train_loss = if m_total > 0.0 {
        uploads.iter().map(|u| u.m as f64 * u.train_loss).sum::<f64>() / m_total
    } else {
        0.0
    };
    server.bytes_up += bytes_up;
    server.bytes_down += bytes_down;
    server.round += 1;
    let report = RoundReport {
        round,
        clients: uploads
            .iter()
            .map(|u| ClientReport {
                id: u.id,
                m: u.m,
                train_loss: u.train_loss,
                local_accuracy: u.local_accuracy,
                bytes_up: u.bytes.len() as u64,
            })
            .collect(),
        train_loss,
        server_accuracy: eval.accuracy,
        server_loss: eval.loss,
        per_class_recall: eval.per_class_recall,
        bytes_up,
        bytes_down,
        cumulative_bytes_up: server.bytes_up,
        cumulative_bytes_down: server.bytes_down,
        duration_secs: start.elapsed().as_secs_f64(),
    };
    server.history.push(report.clone());
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub rounds_completed: usize,
    pub stopped_early: bool,
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
    pub final_loss: f64,
    pub best_accuracy: f64,
    pub per_class_recall: Vec<f64>,
    pub per_class_support: Vec<usize>,
    pub cumulative_bytes_up: u64,
    pub cumulative_bytes_down: u64,
    /// Uplink bytes had every participant sent its full adapter as dense f32.
    pub dense_upload_baseline_bytes: u64,
    pub synthetic_per_client: Vec<usize>,
    pub real_per_client: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct SimulationResult {
    pub reports: Vec<RoundReport>,
    pub summary: Summary,
    pub global: AdapterParams,
}

/// Runs up to `rounds` rounds, stopping early once `target_accuracy` is met.
pub fn run_simulation(
    global: AdapterParams,
    clients: &mut [ClientState],
    protos: &ClassPrototypes,
    test: &EmbeddingDataset,
    cfg: &FederationConfig,
    rounds: usize,
) -> Result<SimulationResult, FederationError> {
    cfg.validate()?;
    let pool = build_pool(cfg.threads)?;
    let initial = evaluate(&global, test, protos, cfg.train.eval_batch)?;
    let mut server = ServerState::new(global);
    let mut stopped_early = false;
    let mut dense_baseline = 0u64;
    let dense_len = broadcast_len(&cfg.adapter) as u64;
    for _ in 0..rounds {
        let report = run_round(&mut server, clients, protos, test, cfg, &pool)?;
        dense_baseline += report.clients.len() as u64 * dense_len;
        if cfg.target_accuracy.is_some_and(|t| report.server_accuracy >= t) {
            stopped_early = server.round < rounds;
            break;
        }
    }
    let last = match server.history.last() {
        Some(_) => evaluate(&server.global, test, protos, cfg.train.eval_batch)?,
        None => initial.clone(),
    };
    let best = server.history.iter().map(|r| r.server_accuracy).fold(initial.accuracy, f64::max);
    let summary = Summary {
        rounds_completed: server.round,
        stopped_early,
        initial_accuracy: initial.accuracy,
        final_accuracy: last.accuracy,
        final_loss: last.loss,
        best_accuracy: best,
        per_class_recall: last.per_class_recall,
        per_class_support: last.per_class_support,
        cumulative_bytes_up: server.bytes_up,
        cumulative_bytes_down: server.bytes_down,
        dense_upload_baseline_bytes: dense_baseline,
        synthetic_per_client: clients.iter().map(|c| c.data.synthetic_count()).collect(),
        real_per_client: clients.iter().map(|c| c.data.real_count()).collect(),
    };
    Ok(SimulationResult { reports: server.history, summary, global: server.global })
}
