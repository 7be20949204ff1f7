use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::encoder::{EmbeddingDataset, EncoderError, LinearEncoder};
use crate::rng::{self, stream};
use crate::tensor::Matrix;

/// Share of each class held out for testing.
pub const TEST_FRACTION: f64 = 0.2;

/// Gaussian mixture with one isotropic component per class, centred on the
/// unit basis vector `e_class` of the raw space.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDatasetSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub raw_dim: usize,
    pub cluster_spread: f64,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct Split {
    pub train: EmbeddingDataset,
    pub test: EmbeddingDataset,
}

/// Per class, a seeded shuffle puts `round(0.2 n)` samples in test and the
/// rest in train; both halves are then shuffled.
pub fn stratified_split(data: &EmbeddingDataset, seed: u64) -> Split {
    let mut r = rng::derive(seed, stream::TOY_DATA, &[1]);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.num_classes()];
    for (i, &l) in data.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for idx in &mut by_class {
        idx.shuffle(&mut r);
        let n_test = (idx.len() as f64 * TEST_FRACTION).round() as usize;
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.shuffle(&mut r);
    test.shuffle(&mut r);
    Split { train: data.subset(&train), test: data.subset(&test) }
}

/// Raw mixture samples before encoding, split into train and test.
pub fn make_raw_toy(spec: &ToyDatasetSpec) -> Result<Split, EncoderError> {
    if spec.raw_dim < spec.num_classes {
        return Err(EncoderError::Invalid(format!(
            "raw_dim {} cannot hold {} basis-vector means",
            spec.raw_dim, spec.num_classes
        )));
    }
    let mut r = rng::derive(spec.seed, stream::TOY_DATA, &[0]);
    let n = spec.num_classes * spec.samples_per_class;
    let labels: Vec<usize> = (0..n).map(|i| i / spec.samples_per_class).collect();
    let x = Matrix::from_fn(n, spec.raw_dim, |i, j| {
        let z: f64 = StandardNormal.sample(&mut r);
        let mean = if j == labels[i] { 1.0 } else { 0.0 };
        (mean + spec.cluster_spread * z) as f32
    });
    let raw = EmbeddingDataset::new(x, labels, spec.num_classes)?;
    Ok(stratified_split(&raw, spec.seed))
}

/// Toy mixture passed through the frozen linear encoder `raw_dim -> embed_dim`.
pub fn make_toy_dataset(spec: &ToyDatasetSpec, embed_dim: usize) -> Result<Split, EncoderError> {
    let raw = make_raw_toy(spec)?;
    let enc = LinearEncoder::new(spec.seed, spec.raw_dim, embed_dim);
    let encode = |d: &EmbeddingDataset| {
        EmbeddingDataset::new(enc.encode_matrix(d.features())?, d.labels().to_vec(), d.num_classes())
    };
    Ok(Split { train: encode(&raw.train)?, test: encode(&raw.test)? })
}

/// Class means of `train`, then the fraction of `test` nearest its own mean.
pub fn nearest_centroid_accuracy(train: &EmbeddingDataset, test: &EmbeddingDataset) -> f64 {
    let (c, d) = (train.num_classes(), train.dim());
    let mut means = vec![vec![0.0f64; d]; c];
    let hist = train.class_histogram();
    for i in 0..train.len() {
        let l = train.labels()[i];
        for (m, &v) in means[l].iter_mut().zip(train.vector(i)) {
            *m += v as f64 / hist[l] as f64;
        }
    }
    let correct = (0..test.len())
        .filter(|&i| {
            let x = test.vector(i);
            let dist = |m: &Vec<f64>| m.iter().zip(x).map(|(a, &b)| (a - b as f64).powi(2)).sum::<f64>();
            let best = (0..c).min_by(|&a, &b| dist(&means[a]).total_cmp(&dist(&means[b]))).unwrap_or(0);
            best == test.labels()[i]
        })
        .count();
    correct as f64 / test.len().max(1) as f64
}
