//! Frozen feature side: labeled embedding datasets, the `FTEM` file format,
//! a seeded linear encoder standing in for a pretrained backbone, and the
//! per-class prototype embeddings used as the text side of the logits.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::rng::{self, stream};
use crate::tensor::{Matrix, TensorError};

pub const EMBEDDING_MAGIC: [u8; 4] = *b"FTEM";
pub const EMBEDDING_VERSION: u32 = 1;
/// magic + version + dim + num_classes + num_samples
pub const EMBEDDING_HEADER_LEN: usize = 4 + 4 + 4 + 4 + 8;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("bad magic at offset 0: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported embedding file version {version} at offset 4")]
    UnsupportedVersion { version: u32 },
    #[error("truncated payload at offset {offset}: need {needed} more bytes, {available} available")]
    Truncated { offset: usize, needed: usize, available: usize },
    #[error("label {label} >= num_classes {num_classes} at offset {offset}")]
    LabelAtOffset { label: u32, num_classes: u32, offset: usize },
    #[error("{extra} trailing bytes after the last record at offset {offset}")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("sample {index}: label {label} >= num_classes {num_classes}")]
    LabelOutOfRange { index: usize, label: usize, num_classes: usize },
    #[error("sample {index} has a non-finite entry")]
    NonFinite { index: usize },
    #[error("{labels} labels for {rows} feature rows")]
    LabelCount { rows: usize, labels: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("could not separate {num_classes} prototypes in {dim} dimensions after {attempts} draws")]
    Separation { num_classes: usize, dim: usize, attempts: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Labeled feature vectors. Synthetic rows are flagged so metrics can
/// separate them from real data.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingDataset {
    num_classes: usize,
    features: Matrix,
    labels: Vec<usize>,
    synthetic: Vec<bool>,
}

impl EmbeddingDataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self, EncoderError> {
        let n = labels.len();
        Self::with_flags(features, labels, vec![false; n], num_classes)
    }

    pub fn with_flags(
        features: Matrix,
        labels: Vec<usize>,
        synthetic: Vec<bool>,
        num_classes: usize,
    ) -> Result<Self, EncoderError> {
        if labels.len() != features.rows() || synthetic.len() != labels.len() {
            return Err(EncoderError::LabelCount { rows: features.rows(), labels: labels.len() });
        }
        if num_classes == 0 {
            return Err(EncoderError::Invalid("num_classes must be positive".into()));
        }
        for (index, &label) in labels.iter().enumerate() {
            if label >= num_classes {
                return Err(EncoderError::LabelOutOfRange { index, label, num_classes });
            }
            if !features.row(index).iter().all(|v| v.is_finite()) {
                return Err(EncoderError::NonFinite { index });
            }
        }
        Ok(Self { num_classes, features, labels, synthetic })
    }

    pub fn empty(dim: usize, num_classes: usize) -> Self {
        Self { num_classes, features: Matrix::zeros(0, dim), labels: vec![], synthetic: vec![] }
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn synthetic_flags(&self) -> &[bool] {
        &self.synthetic
    }

    pub fn is_synthetic(&self, i: usize) -> bool {
        self.synthetic[i]
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        self.features.row(i)
    }

    /// Per-class sample counts (real and synthetic).
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    pub fn real_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for (&l, &s) in self.labels.iter().zip(&self.synthetic) {
            if !s {
                h[l] += 1;
            }
        }
        h
    }

    pub fn real_count(&self) -> usize {
        self.synthetic.iter().filter(|s| !**s).count()
    }

    pub fn synthetic_count(&self) -> usize {
        self.len() - self.real_count()
    }

    /// Rows at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            num_classes: self.num_classes,
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            synthetic: idx.iter().map(|&i| self.synthetic[i]).collect(),
        }
    }

    /// The real (non-synthetic) rows only.
    pub fn real_only(&self) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| !self.synthetic[i]).collect();
        self.subset(&idx)
    }

    /// Appends rows of `other`; shapes and class counts must agree.
    pub fn extend(&mut self, other: &Self) -> Result<(), EncoderError> {
        if other.dim() != self.dim() || other.num_classes != self.num_classes {
            return Err(EncoderError::Invalid(format!(
                "cannot append dim {} / {} classes to dim {} / {} classes",
                other.dim(),
                other.num_classes,
                self.dim(),
                self.num_classes
            )));
        }
        let mut data = std::mem::replace(&mut self.features, Matrix::zeros(0, 0)).into_vec();
        data.extend_from_slice(other.features.data());
        self.features = Matrix::from_vec(self.labels.len() + other.len(), other.dim(), data)?;
        self.labels.extend_from_slice(&other.labels);
        self.synthetic.extend_from_slice(&other.synthetic);
        Ok(())
    }

    /// Serializes to the `FTEM` layout. Synthetic flags are not stored.
    pub fn to_bytes(&self) -> Vec<u8> {
        let dim = self.dim();
        let mut out = Vec::with_capacity(EMBEDDING_HEADER_LEN + self.len() * (4 * dim + 4));
        out.extend_from_slice(&EMBEDDING_MAGIC);
        out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
        out.extend_from_slice(&(dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for i in 0..self.len() {
            for v in self.features.row(i) {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&(self.labels[i] as u32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EncoderError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != EMBEDDING_MAGIC {
            return Err(EncoderError::BadMagic {
                expected: String::from_utf8_lossy(&EMBEDDING_MAGIC).into_owned(),
                found: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        let version = r.u32()?;
        if version != EMBEDDING_VERSION {
            return Err(EncoderError::UnsupportedVersion { version });
        }
        let dim = r.u32()? as usize;
        let num_classes = r.u32()?;
        let num_samples = r.u64()? as usize;
        if num_classes == 0 {
            return Err(EncoderError::Invalid("num_classes must be positive".into()));
        }
        let record = 4 * dim + 4;
        // Check the full extent up front so the error names the first missing record.
        let available = bytes.len() - r.pos;
        let complete = available / record.max(1);
        if complete < num_samples {
            let offset = r.pos + complete * record;
            return Err(EncoderError::Truncated {
                offset,
                needed: record,
                available: bytes.len() - offset,
            });
        }
        let mut data = Vec::with_capacity(num_samples * dim);
        let mut labels = Vec::with_capacity(num_samples);
        for _ in 0..num_samples {
            for _ in 0..dim {
                data.push(r.f32()?);
            }
            let at = r.pos;
            let label = r.u32()?;
            if label >= num_classes {
                return Err(EncoderError::LabelAtOffset { label, num_classes, offset: at });
            }
            labels.push(label as usize);
        }
        if r.pos != bytes.len() {
            return Err(EncoderError::TrailingBytes { offset: r.pos, extra: bytes.len() - r.pos });
        }
        let features = Matrix::from_vec(num_samples, dim, data)?;
        Self::new(features, labels, num_classes as usize)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], EncoderError> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(EncoderError::Truncated { offset: self.pos, needed: n, available });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, EncoderError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, EncoderError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self) -> Result<f32, EncoderError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn save_embeddings(path: impl AsRef<Path>, ds: &EmbeddingDataset) -> Result<(), EncoderError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&ds.to_bytes())?;
    Ok(())
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingDataset, EncoderError> {
    EmbeddingDataset::from_bytes(&fs::read(path)?)
}

/// Fixed random linear map `raw_dim -> embed_dim`, no bias. Never trained.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearEncoder {
    weights: Matrix,
}

impl LinearEncoder {
    /// Entries are drawn from N(0, 1/embed_dim) so norms are roughly preserved.
    pub fn new(seed: u64, raw_dim: usize, embed_dim: usize) -> Self {
        assert!(raw_dim > 0 && embed_dim > 0, "encoder dims must be positive");
        let mut rng = rng::derive(seed, stream::ENCODER, &[raw_dim as u64, embed_dim as u64]);
        let std = (1.0 / embed_dim as f64).sqrt();
        let weights = Matrix::from_fn(raw_dim, embed_dim, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (z * std) as f32
        });
        Self { weights }
    }

    pub fn raw_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn encode_matrix(&self, raw: &Matrix) -> Result<Matrix, EncoderError> {
        Ok(raw.matmul(&self.weights)?)
    }

    pub fn encode(
        &self,
        raw: &Matrix,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<EmbeddingDataset, EncoderError> {
        EmbeddingDataset::new(self.encode_matrix(raw)?, labels, num_classes)
    }
}

/// Frozen unit-norm embedding per class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassPrototypes {
    matrix: Matrix,
}

/// Largest |cosine| allowed between two prototype rows.
pub const MAX_PROTOTYPE_COSINE: f64 = 0.5;
const PROTOTYPE_ATTEMPTS: usize = 1000;

impl ClassPrototypes {
    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn num_classes(&self) -> usize {
        self.matrix.rows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }
}

pub fn make_prototypes(num_classes: usize, dim: usize, seed: u64) -> Result<ClassPrototypes, EncoderError> {
    if num_classes < 2 || dim == 0 {
        return Err(EncoderError::Invalid(format!(
            "prototypes need >= 2 classes and a positive dim, got {num_classes} x {dim}"
        )));
    }
    let mut rng = rng::derive(seed, stream::PROTOTYPES, &[num_classes as u64, dim as u64]);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        let mut accepted = None;
        for _ in 0..PROTOTYPE_ATTEMPTS {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= n);
            let ok = rows.iter().all(|r| {
                let c: f64 = r.iter().zip(&v).map(|(a, b)| a * b).sum();
                c.abs() < MAX_PROTOTYPE_COSINE
            });
            if ok {
                accepted = Some(v);
                break;
            }
        }
        match accepted {
            Some(v) => rows.push(v),
            None => {
                return Err(EncoderError::Separation {
                    num_classes,
                    dim,
                    attempts: PROTOTYPE_ATTEMPTS,
                })
            }
        }
    }
    let matrix = Matrix::from_fn(num_classes, dim, |i, j| rows[i][j] as f32);
    Ok(ClassPrototypes { matrix })
}
