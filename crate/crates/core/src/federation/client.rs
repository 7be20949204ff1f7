use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::server::{build_pool, evaluate};
use super::{FederationConfig, FederationError};
use crate::adapter::{adapter_forward, adapter_loss, logits, prototype_var, AdapterParams, AdapterVars};
use crate::encoder::{ClassPrototypes, EmbeddingDataset};
use crate::gan::{augment, train_gan, AugmentReport, EpochLosses, GanConfig, GanError};
use crate::qlora::{apply_delta, encode_delta, DeltaTensor, LowRankDelta};
use crate::rng::{self, stream};
use crate::tensor::{adam_step, AdamConfig, AdamState, Matrix, Tape, Var};

/// One participant. `base` is the last broadcast global model and is never
/// modified locally; only `delta` trains.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: usize,
    pub data: EmbeddingDataset,
    pub base: AdapterParams,
    pub delta: LowRankDelta,
    pub adam: AdamState,
    /// Aggregation weight.
    pub m: usize,
    pub augmentation: Option<AugmentReport>,
    pub gan_history: Vec<EpochLosses>,
}

impl ClientState {
    pub fn new(id: usize, data: EmbeddingDataset, real_only_weight: bool) -> Self {
        let m = if real_only_weight { data.real_count() } else { data.len() };
        Self {
            id,
            base: AdapterParams::zeros(data.dim(), 1),
            delta: LowRankDelta { alpha: 1.0, entries: Vec::new() },
            data,
            adam: AdamState::new(),
            m,
            augmentation: None,
            gan_history: Vec::new(),
        }
    }

    /// Installs the broadcast model and a fresh trainable delta whose
    /// effective update is exactly zero.
    pub fn receive(&mut self, global: &AdapterParams, cfg: &FederationConfig, round: usize) {
        self.base = global.clone();
        let mut r = rng::derive(cfg.seed, stream::LOCAL_TRAIN, &[round as u64, self.id as u64, 0]);
        self.delta = LowRankDelta::init_for(global, cfg.lora.rank, cfg.lora.alpha(), &mut r);
        self.adam = AdamState::new();
    }
}

/// Trains a GAN per client on its local data and appends synthetic rows to
/// the minority classes. Clients without any class of 2+ samples are left
/// unaugmented.
pub fn prepare_clients(
    datasets: Vec<EmbeddingDataset>,
    gan: Option<&GanConfig>,
    seed: u64,
    real_only_weight: bool,
    threads: usize,
) -> Result<Vec<ClientState>, FederationError> {
    let pool = build_pool(threads)?;
    pool.install(|| {
        datasets
            .into_par_iter()
            .enumerate()
            .map(|(id, data)| {
                let Some(cfg) = gan.filter(|g| g.enabled) else {
                    return Ok(ClientState::new(id, data, real_only_weight));
                };
                let mut r = rng::derive(seed, stream::GAN, &[id as u64]);
                match train_gan(&data, cfg, &mut r) {
                    Ok(outcome) => {
                        let mut ar = rng::derive(seed, stream::AUGMENT, &[id as u64]);
                        let (augmented, report) =
                            augment(&data, &outcome.generator, &cfg.augmentation_policy(), &mut ar)?;
                        let mut c = ClientState::new(id, augmented, real_only_weight);
                        c.augmentation = Some(report);
                        c.gan_history = outcome.history;
                        Ok(c)
                    }
                    Err(GanError::NoTrainingData) => Ok(ClientState::new(id, data, real_only_weight)),
                    Err(e) => Err(e.into()),
                }
            })
            .collect()
    })
}

#[derive(Clone, Debug)]
pub struct ClientUpload {
    pub id: usize,
    pub bytes: Vec<u8>,
    pub m: usize,
    /// Mean minibatch loss over the round.
    pub train_loss: f64,
    /// Accuracy of `base + delta` on the client's real samples.
    pub local_accuracy: f64,
    pub steps: usize,
}

/// Base plus the current local delta.
pub fn effective_params(client: &ClientState) -> Result<AdapterParams, FederationError> {
    Ok(apply_delta(&client.base, &client.delta)?)
}

fn trainable(delta: &LowRankDelta) -> Vec<&Matrix> {
    delta
        .entries
        .iter()
        .flat_map(|e| match &e.tensor {
            DeltaTensor::LowRank { a, b } => vec![a, b],
            DeltaTensor::Dense(d) => vec![d],
        })
        .collect()
}

fn trainable_mut(delta: &mut LowRankDelta) -> Vec<&mut Matrix> {
    delta
        .entries
        .iter_mut()
        .flat_map(|e| match &mut e.tensor {
            DeltaTensor::LowRank { a, b } => vec![a, b],
            DeltaTensor::Dense(d) => vec![d],
        })
        .collect()
}

/// Records `W0 + (alpha/r) A B` (or `W0 + D`) for every tensor and returns
/// the adapter handles plus the trainable leaves in [`trainable`] order.
fn record_lora(
    tape: &mut Tape<f32>,
    base: &AdapterParams,
    delta: &LowRankDelta,
) -> Result<(AdapterVars, Vec<Var>), FederationError> {
    let mut leaves = Vec::new();
    let mut eff = Vec::with_capacity(10);
    for (entry, w0) in delta.entries.iter().zip(base.tensors()) {
        let w0v = tape.constant(w0.clone());
        let update = match &entry.tensor {
            DeltaTensor::LowRank { a, b } => {
                let av = tape.param(a.clone());
                let bv = tape.param(b.clone());
                leaves.extend([av, bv]);
                let ab = tape.matmul(av, bv)?;
                tape.scale(ab, delta.alpha / a.cols() as f32)?
            }
            DeltaTensor::Dense(d) => {
                let dv = tape.param(d.clone());
                leaves.push(dv);
                dv
            }
        };
        eff.push(tape.add(w0v, update)?);
    }
    let arr: [Var; 10] = eff
        .try_into()
        .map_err(|_| FederationError::Config("delta does not cover every adapter tensor".into()))?;
    Ok((AdapterVars::from_array(arr), leaves))
}

fn lora_step(
    client: &ClientState,
    idx: &[usize],
    protos: &ClassPrototypes,
    cfg: &FederationConfig,
) -> Result<(f64, Vec<Matrix>), FederationError> {
    let mut tape = Tape::new();
    let (vars, leaves) = record_lora(&mut tape, &client.base, &client.delta)?;
    let x = tape.constant(client.data.features().select_rows(idx));
    let labels: Vec<usize> = idx.iter().map(|&i| client.data.labels()[i]).collect();
    let pv = prototype_var(&mut tape, protos);
    let v_opt = adapter_forward(&mut tape, &vars, x)?;
    let lg = logits(&mut tape, &vars, v_opt, pv, cfg.adapter.logit_quantizer())?;
    let loss = adapter_loss(&mut tape, lg, &labels, cfg.adapter.sym_text_loss)?;
    let value = tape.value(loss).data()[0] as f64;
    let grads = tape.backward(loss)?;
    let like = trainable(&client.delta);
    Ok((value, leaves.iter().zip(like).map(|(&v, m)| grads.get_or_zeros(v, m)).collect()))
}

/// Receives `global`, runs `local_epochs` of minibatch Adam on the delta and
/// returns the encoded upload.
pub fn client_update(
    client: &mut ClientState,
    global: &AdapterParams,
    protos: &ClassPrototypes,
    cfg: &FederationConfig,
    round: usize,
) -> Result<ClientUpload, FederationError> {
    if client.data.is_empty() {
        return Err(FederationError::EmptyClient { client: client.id });
    }
    client.receive(global, cfg, round);
    let adam = AdamConfig::with_lr(cfg.train.lr);
    let mut r = rng::derive(cfg.seed, stream::LOCAL_TRAIN, &[round as u64, client.id as u64, 1]);
    let mut order: Vec<usize> = (0..client.data.len()).collect();
    let (mut loss_sum, mut steps) = (0.0, 0usize);
    for _ in 0..cfg.train.local_epochs {
        order.shuffle(&mut r);
        for chunk in order.chunks(cfg.train.batch) {
            let (loss, grads) = lora_step(client, chunk, protos, cfg)?;
            let grefs: Vec<&Matrix> = grads.iter().collect();
            adam_step(&mut trainable_mut(&mut client.delta), &grefs, &mut client.adam, &adam)?;
            loss_sum += loss;
            steps += 1;
        }
    }
    let eff = effective_params(client)?;
    let train_loss = if steps > 0 {
        loss_sum / steps as f64
    } else {
        evaluate(&eff, &client.data, protos, cfg.train.eval_batch)?.loss
    };
    let real = client.data.real_only();
    let local_accuracy =
        if real.is_empty() { 0.0 } else { evaluate(&eff, &real, protos, cfg.train.eval_batch)?.accuracy };
    let bytes = encode_delta(&client.delta, cfg.lora.precision()?, cfg.lora.block_size)?;
    Ok(ClientUpload { id: client.id, bytes, m: client.m, train_loss, local_accuracy, steps })
}
