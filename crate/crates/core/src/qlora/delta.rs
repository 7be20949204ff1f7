use rand::Rng as _;

use super::wire::{Payload, Precision, WireMessage, WireTensor};
use super::QloraError;
use crate::adapter::{AdapterParams, ParamKind, PARAM_LAYOUT};
use crate::rng::Rng;
use crate::tensor::Matrix;

/// Update for one adapter tensor.
#[derive(Clone, Debug, PartialEq)]
pub enum DeltaTensor {
    /// Effective update `(alpha / r) * a * b` with `a: rows x r`, `b: r x cols`.
    LowRank { a: Matrix, b: Matrix },
    Dense(Matrix),
}

impl DeltaTensor {
    pub fn rank(&self) -> usize {
        match self {
            DeltaTensor::LowRank { a, .. } => a.cols(),
            DeltaTensor::Dense(_) => 0,
        }
    }

    /// Shape of the tensor this entry updates.
    pub fn target_shape(&self) -> (usize, usize) {
        match self {
            DeltaTensor::LowRank { a, b } => (a.rows(), b.cols()),
            DeltaTensor::Dense(d) => d.shape(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeltaEntry {
    pub name: String,
    pub tensor: DeltaTensor,
}

/// Low-rank update of a whole [`AdapterParams`], in [`PARAM_LAYOUT`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankDelta {
    pub alpha: f32,
    pub entries: Vec<DeltaEntry>,
}

/// `(alpha / r) * a * b`
pub fn scaled_product(a: &Matrix, b: &Matrix, alpha: f32) -> Result<Matrix, QloraError> {
    let r = a.cols();
    let ab = a.matmul(b)?;
    if r == 0 {
        return Ok(ab);
    }
    let s = alpha as f64 / r as f64;
    Ok(ab.map(|v| (v as f64 * s) as f32))
}

impl LowRankDelta {
    /// Rank used for a `rows x cols` matrix when `rank` is requested.
    pub fn effective_rank(rows: usize, cols: usize, rank: usize) -> usize {
        rank.min(rows).min(cols)
    }

    /// Exactly-zero delta with `a = 0`, `b = 0`.
    pub fn zeros_for(params: &AdapterParams, rank: usize, alpha: f32) -> Self {
        Self::build(params, rank, alpha)
    }

    /// Trainable starting point: `a` uniform in `±1/sqrt(rows)`, `b = 0`,
    /// dense parts zero. The effective update is exactly zero.
    pub fn init_for(params: &AdapterParams, rank: usize, alpha: f32, rng: &mut Rng) -> Self {
        let mut out = Self::build(params, rank, alpha);
        for e in &mut out.entries {
            if let DeltaTensor::LowRank { a, .. } = &mut e.tensor {
                let bound = 1.0 / (a.rows() as f32).sqrt();
                for v in a.data_mut() {
                    *v = rng.random_range(-bound..=bound);
                }
            }
        }
        out
    }

    fn build(params: &AdapterParams, rank: usize, alpha: f32) -> Self {
        let entries = PARAM_LAYOUT
            .iter()
            .zip(params.tensors())
            .map(|(&(name, kind), m)| {
                let (rows, cols) = m.shape();
                let tensor = match kind {
                    ParamKind::Matrix => {
                        let r = Self::effective_rank(rows, cols, rank);
                        DeltaTensor::LowRank { a: Matrix::zeros(rows, r), b: Matrix::zeros(r, cols) }
                    }
                    ParamKind::Dense => DeltaTensor::Dense(Matrix::zeros(rows, cols)),
                };
                DeltaEntry { name: name.to_owned(), tensor }
            })
            .collect();
        Self { alpha, entries }
    }

    pub fn entry(&self, name: &str) -> Option<&DeltaEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Dense update this entry contributes.
    pub fn effective(&self, entry: &DeltaEntry) -> Result<Matrix, QloraError> {
        match &entry.tensor {
            DeltaTensor::LowRank { a, b } => scaled_product(a, b, self.alpha),
            DeltaTensor::Dense(d) => Ok(d.clone()),
        }
    }

    pub fn is_zero(&self) -> Result<bool, QloraError> {
        for e in &self.entries {
            if self.effective(e)?.data().iter().any(|&v| v != 0.0) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Number of transmitted scalars.
    pub fn numel(&self) -> usize {
        self.entries
            .iter()
            .map(|e| match &e.tensor {
                DeltaTensor::LowRank { a, b } => a.len() + b.len(),
                DeltaTensor::Dense(d) => d.len(),
            })
            .sum()
    }

    pub fn to_wire(&self, precision: Precision, block_size: usize) -> Result<WireMessage, QloraError> {
        let tensors = self
            .entries
            .iter()
            .map(|e| {
                let (rows, cols) = e.tensor.target_shape();
                let values: Vec<f32> = match &e.tensor {
                    DeltaTensor::LowRank { a, b } => a.data().iter().chain(b.data()).copied().collect(),
                    DeltaTensor::Dense(d) => d.data().to_vec(),
                };
                Ok(WireTensor {
                    name: e.name.clone(),
                    rows,
                    cols,
                    rank: e.tensor.rank(),
                    payload: Payload::encode(&values, precision, block_size)?,
                })
            })
            .collect::<Result<_, QloraError>>()?;
        Ok(WireMessage { precision, block_size, tensors })
    }

    /// Rebuilds a delta from decoded (dequantized) wire tensors. `alpha` is
    /// protocol configuration and is not carried in the message.
    pub fn from_wire(msg: &WireMessage, alpha: f32) -> Result<Self, QloraError> {
        let entries = msg
            .tensors
            .iter()
            .map(|t| {
                let values = t.payload.values()?;
                let tensor = if t.rank == 0 {
                    DeltaTensor::Dense(Matrix::from_vec(t.rows, t.cols, values)?)
                } else {
                    let split = t.rows * t.rank;
                    let b = values[split..].to_vec();
                    let mut a = values;
                    a.truncate(split);
                    DeltaTensor::LowRank {
                        a: Matrix::from_vec(t.rows, t.rank, a)?,
                        b: Matrix::from_vec(t.rank, t.cols, b)?,
                    }
                };
                Ok(DeltaEntry { name: t.name.clone(), tensor })
            })
            .collect::<Result<_, QloraError>>()?;
        Ok(Self { alpha, entries })
    }
}

pub fn encode_delta(delta: &LowRankDelta, precision: Precision, block_size: usize) -> Result<Vec<u8>, QloraError> {
    delta.to_wire(precision, block_size)?.encode()
}

pub fn decode_delta(bytes: &[u8], alpha: f32) -> Result<LowRankDelta, QloraError> {
    LowRankDelta::from_wire(&WireMessage::decode(bytes)?, alpha)
}

/// `base + delta` for every tensor; entries are matched by name.
pub fn apply_delta(base: &AdapterParams, delta: &LowRankDelta) -> Result<AdapterParams, QloraError> {
    let mut out = base.clone();
    for e in &delta.entries {
        let target = out
            .tensor_mut(&e.name)
            .ok_or_else(|| QloraError::UnknownTensor(e.name.clone()))?;
        let (rows, cols) = e.tensor.target_shape();
        if target.shape() != (rows, cols) {
            return Err(QloraError::TensorShape {
                name: e.name.clone(),
                detail: format!("delta is {rows}x{cols}, parameter is {}x{}", target.rows(), target.cols()),
            });
        }
        if let DeltaTensor::LowRank { a, b } = &e.tensor {
            if a.cols() != b.rows() || a.cols() > rows.min(cols) {
                return Err(QloraError::RankTooLarge { name: e.name.clone(), rank: a.cols(), rows, cols });
            }
        }
        target.add_assign(&delta.effective(e)?)?;
    }
    Ok(out)
}

/// Dense 32-bit serialization of a full parameter set (the broadcast
/// message and the uncompressed-upload baseline).
pub fn encode_params_dense(params: &AdapterParams) -> Result<Vec<u8>, QloraError> {
    let tensors = PARAM_LAYOUT
        .iter()
        .zip(params.tensors())
        .map(|(&(name, _), m)| WireTensor {
            name: name.to_owned(),
            rows: m.rows(),
            cols: m.cols(),
            rank: 0,
            payload: Payload::Raw(m.data().to_vec()),
        })
        .collect();
    WireMessage { precision: Precision::F32, block_size: 0, tensors }.encode()
}
