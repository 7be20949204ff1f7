use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};

use super::FederationError;
use crate::encoder::EmbeddingDataset;
use crate::rng::Rng;

const DIRICHLET_ATTEMPTS: usize = 100;

/// Result of [`partition_long_tail`].
#[derive(Clone, Debug)]
pub struct LongTailPartition {
    /// Class counts after the long-tail reshape.
    pub class_counts: Vec<usize>,
    pub clients: Vec<EmbeddingDataset>,
}

impl LongTailPartition {
    pub fn total(&self) -> usize {
        self.class_counts.iter().sum()
    }
}

/// `round(head * imbalance_factor^(-k / (C - 1)))` for class `k`, capped by
/// what each class actually has.
pub fn long_tail_counts(available: &[usize], imbalance_factor: f64) -> Vec<usize> {
    let c = available.len();
    let head = available.iter().copied().max().unwrap_or(0);
    available
        .iter()
        .enumerate()
        .map(|(k, &n)| {
            let frac = if c > 1 { k as f64 / (c - 1) as f64 } else { 0.0 };
            let want = (head as f64 * imbalance_factor.powf(-frac)).round() as usize;
            want.min(n)
        })
        .collect()
}

fn dirichlet(alpha: f64, n: usize, rng: &mut Rng) -> Option<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).ok()?;
    let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    (total > 0.0 && total.is_finite()).then(|| draws.iter().map(|d| d / total).collect())
}

/// Splits `n` items by cumulative rounded proportions, so counts always sum to `n`.
fn split_counts(n: usize, props: &[f64]) -> Vec<usize> {
    let mut out = Vec::with_capacity(props.len());
    let (mut cum, mut prev) = (0.0, 0usize);
    for (i, p) in props.iter().enumerate() {
        cum += p;
        let edge = if i + 1 == props.len() { n } else { ((cum * n as f64).round() as usize).min(n) };
        let edge = edge.max(prev);
        out.push(edge - prev);
        prev = edge;
    }
    out
}

/// Reshapes the class counts to an exponential long tail (class 0 is the
/// head), then deals each class across clients by a Dirichlet(alpha) draw.
/// The draw is repeated until every client holds at least one sample of at
/// least two classes.
pub fn partition_long_tail(
    data: &EmbeddingDataset,
    n_clients: usize,
    dirichlet_alpha: f64,
    imbalance_factor: f64,
    rng: &mut Rng,
) -> Result<LongTailPartition, FederationError> {
    if n_clients == 0 {
        return Err(FederationError::Config("n_clients must be at least 1".into()));
    }
    if !(imbalance_factor >= 1.0 && imbalance_factor.is_finite()) {
        return Err(FederationError::Config("imbalance_factor must be >= 1".into()));
    }
    if !(dirichlet_alpha > 0.0 && dirichlet_alpha.is_finite()) {
        return Err(FederationError::Config("dirichlet_alpha must be positive".into()));
    }
    let classes = data.num_classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in data.labels().iter().enumerate() {
        if !data.is_synthetic(i) {
            by_class[l].push(i);
        }
    }
    let available: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let class_counts = long_tail_counts(&available, imbalance_factor);
    for (idx, &keep) in by_class.iter_mut().zip(&class_counts) {
        idx.shuffle(rng);
        idx.truncate(keep);
    }

    let mut last_bad = 0;
    for _ in 0..DIRICHLET_ATTEMPTS {
        let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
        let mut classes_held = vec![0usize; n_clients];
        let mut degenerate = false;
        for idx in &by_class {
            if idx.is_empty() {
                continue;
            }
            let Some(props) = dirichlet(dirichlet_alpha, n_clients, rng) else {
                degenerate = true;
                break;
            };
            let mut start = 0;
            for (client, take) in split_counts(idx.len(), &props).into_iter().enumerate() {
                if take > 0 {
                    classes_held[client] += 1;
                }
                assigned[client].extend_from_slice(&idx[start..start + take]);
                start += take;
            }
        }
        if degenerate {
            continue;
        }
        match classes_held.iter().position(|&h| h < 2) {
            Some(client) => last_bad = client,
            None => {
                let clients = assigned
                    .into_iter()
                    .map(|mut a| {
                        a.sort_unstable();
                        data.subset(&a)
                    })
                    .collect();
                return Ok(LongTailPartition { class_counts, clients });
            }
        }
    }
    Err(FederationError::Partition {
        client: last_bad,
        attempts: DIRICHLET_ATTEMPTS,
        detail: format!("client {last_bad} never held samples of two classes"),
    })
}
