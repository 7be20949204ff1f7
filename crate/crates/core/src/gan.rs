//! Class-conditional GAN over embedding vectors, used to top up minority
//! classes before federated training starts.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{EmbeddingDataset, EncoderError};
use crate::rng::Rng;
use crate::tensor::{adam_step, AdamConfig, AdamState, Matrix, Scalar, Tape, TensorError, Var};
use rand::Rng as _;

#[derive(Debug, Error)]
pub enum GanError {
    #[error("no class has at least 2 real samples to train on")]
    NoTrainingData,
    #[error("invalid gan config: {0}")]
    Config(String),
    #[error("class {class} is outside 0..{num_classes}")]
    ClassOutOfRange { class: usize, num_classes: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorLoss {
    /// `-mean log σ(D(G(z)))`
    NonSaturating,
    /// `mean log(1 - σ(D(G(z))))`
    Paper,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetRule {
    /// Raise each class to the upper median of the nonzero class counts.
    Median,
    /// Raise each class to this count.
    Fixed(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub target: TargetRule,
    /// Largest synthetic share of any class after augmentation; 1.0 disables the cap.
    pub max_synthetic_fraction: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self { target: TargetRule::Median, max_synthetic_fraction: 1.0 }
    }
}

impl AugmentationPolicy {
    /// Most synthetic samples a class with `real` samples may receive.
    pub fn synthetic_cap(&self, real: usize) -> Option<usize> {
        let f = self.max_synthetic_fraction;
        if f >= 1.0 {
            return None;
        }
        // small slack so exact ratios such as 10 * 0.5 / 0.5 do not floor to 9
        Some((real as f64 * f / (1.0 - f) + 1e-9).floor() as usize)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanConfig {
    pub enabled: bool,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub z_dim: usize,
    pub k_disc: usize,
    pub hidden: Vec<usize>,
    pub loss: GeneratorLoss,
    /// Draw GAN minibatches class-balanced (uniform class, then uniform
    /// sample with replacement) instead of shuffling the local data.
    pub balanced_batches: bool,
    pub policy: TargetRule,
    /// Maximum synthetic fraction per class.
    pub cap: f64,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            epochs: 200,
            batch: 32,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            z_dim: 16,
            k_disc: 1,
            hidden: vec![64],
            loss: GeneratorLoss::NonSaturating,
            balanced_batches: true,
            policy: TargetRule::Median,
            cap: 1.0,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<(), GanError> {
        let bad = |m: &str| Err(GanError::Config(m.into()));
        if self.batch == 0 {
            return bad("batch must be positive");
        }
        if self.z_dim == 0 {
            return bad("z_dim must be positive");
        }
        if self.k_disc == 0 {
            return bad("k_disc must be positive");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive");
        }
        if !(self.cap > 0.0 && self.cap <= 1.0) {
            return bad("cap must lie in (0, 1]");
        }
        if let TargetRule::Fixed(0) = self.policy {
            return bad("fixed target count must be positive");
        }
        Ok(())
    }

    pub fn augmentation_policy(&self) -> AugmentationPolicy {
        AugmentationPolicy { target: self.policy, max_synthetic_fraction: self.cap }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, ..AdamConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T: Scalar = f32> {
    pub w: Matrix<T>,
    pub b: Matrix<T>,
}

/// Fully connected ReLU network with a linear output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T: Scalar = f32> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> Mlp<T> {
    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn init(sizes: &[usize], rng: &mut Rng) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                Layer {
                    w: Matrix::from_fn(w[0], w[1], |_, _| T::from_wide(rng.random_range(-bound..=bound))),
                    b: Matrix::zeros(1, w[1]),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn tensors(&self) -> Vec<&Matrix<T>> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.w, &mut l.b]).collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|m| m.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Mlp<U> {
        Mlp { layers: self.layers.iter().map(|l| Layer { w: l.w.cast(), b: l.b.cast() }).collect() }
    }

    /// Records every tensor (in [`tensors`](Self::tensors) order).
    pub fn record(&self, tape: &mut Tape<T>, tracked: bool) -> Vec<Var> {
        self.tensors()
            .into_iter()
            .map(|m| if tracked { tape.param(m.clone()) } else { tape.constant(m.clone()) })
            .collect()
    }

    pub fn forward(tape: &mut Tape<T>, vars: &[Var], x: Var) -> Result<Var, TensorError> {
        let n = vars.len() / 2;
        let mut h = x;
        for (i, pair) in vars.chunks(2).enumerate() {
            h = tape.matmul(h, pair[0])?;
            h = tape.add_row(h, pair[1])?;
            if i + 1 < n {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }
}

/// OneHot rows for `labels`.
pub fn one_hot<T: Scalar>(labels: &[usize], num_classes: usize) -> Matrix<T> {
    Matrix::from_fn(labels.len(), num_classes, |r, c| if labels[r] == c { T::one() } else { T::zero() })
}

/// Maps `z ⊕ onehot(class)` to an embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T: Scalar = f32> {
    pub net: Mlp<T>,
    pub z_dim: usize,
    pub num_classes: usize,
    pub dim: usize,
    /// Classes whose real data was seen in training.
    pub trained: Vec<bool>,
}

/// Maps `x ⊕ onehot(class)` to one real/fake logit.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T: Scalar = f32> {
    pub net: Mlp<T>,
    pub num_classes: usize,
    pub dim: usize,
}

impl<T: Scalar> Generator<T> {
    pub fn init(z_dim: usize, num_classes: usize, dim: usize, hidden: &[usize], rng: &mut Rng) -> Self {
        let mut sizes = vec![z_dim + num_classes];
        sizes.extend_from_slice(hidden);
        sizes.push(dim);
        Self { net: Mlp::init(&sizes, rng), z_dim, num_classes, dim, trained: vec![true; num_classes] }
    }

    pub fn forward(&self, tape: &mut Tape<T>, vars: &[Var], z: Var, cond: Var) -> Result<Var, TensorError> {
        let input = tape.concat_cols(z, cond)?;
        Mlp::forward(tape, vars, input)
    }

    /// Evaluates the generator on explicit noise rows.
    pub fn apply(&self, z: &Matrix<T>, labels: &[usize]) -> Result<Matrix<T>, GanError> {
        self.check_labels(labels)?;
        let mut tape = Tape::new();
        let vars = self.net.record(&mut tape, false);
        let zv = tape.constant(z.clone());
        let cv = tape.constant(one_hot(labels, self.num_classes));
        let out = self.forward(&mut tape, &vars, zv, cv)?;
        Ok(tape.value(out).clone())
    }

    pub fn sample_noise(&self, n: usize, rng: &mut Rng) -> Matrix<T> {
        Matrix::from_fn(n, self.z_dim, |_, _| T::from_wide(StandardNormal.sample(rng)))
    }

    /// `n` synthetic embeddings conditioned on `class`.
    pub fn generate(&self, class: usize, n: usize, rng: &mut Rng) -> Result<Matrix<T>, GanError> {
        let z = self.sample_noise(n, rng);
        self.apply(&z, &vec![class; n])
    }

    fn check_labels(&self, labels: &[usize]) -> Result<(), GanError> {
        match labels.iter().find(|&&l| l >= self.num_classes) {
            Some(&class) => Err(GanError::ClassOutOfRange { class, num_classes: self.num_classes }),
            None => Ok(()),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Generator<U> {
        Generator {
            net: self.net.cast(),
            z_dim: self.z_dim,
            num_classes: self.num_classes,
            dim: self.dim,
            trained: self.trained.clone(),
        }
    }
}

impl<T: Scalar> Discriminator<T> {
    pub fn init(num_classes: usize, dim: usize, hidden: &[usize], rng: &mut Rng) -> Self {
        let mut sizes = vec![dim + num_classes];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Self { net: Mlp::init(&sizes, rng), num_classes, dim }
    }

    pub fn forward(&self, tape: &mut Tape<T>, vars: &[Var], x: Var, cond: Var) -> Result<Var, TensorError> {
        let input = tape.concat_cols(x, cond)?;
        Mlp::forward(tape, vars, input)
    }

    /// Logits for explicit inputs.
    pub fn apply(&self, x: &Matrix<T>, labels: &[usize]) -> Result<Matrix<T>, GanError> {
        let mut tape = Tape::new();
        let vars = self.net.record(&mut tape, false);
        let xv = tape.constant(x.clone());
        let cv = tape.constant(one_hot(labels, self.num_classes));
        let out = self.forward(&mut tape, &vars, xv, cv)?;
        Ok(tape.value(out).clone())
    }

    pub fn cast<U: Scalar>(&self) -> Discriminator<U> {
        Discriminator { net: self.net.cast(), num_classes: self.num_classes, dim: self.dim }
    }
}

/// `-(mean log σ(real) + mean log(1 - σ(fake)))` on discriminator logits.
pub fn d_loss<T: Scalar>(tape: &mut Tape<T>, real_logits: Var, fake_logits: Var) -> Result<Var, TensorError> {
    let lr = tape.log_sigmoid(real_logits)?;
    let mr = tape.mean(lr)?;
    let neg = tape.scale(fake_logits, -T::one())?;
    let lf = tape.log_sigmoid(neg)?;
    let mf = tape.mean(lf)?;
    let v = tape.add(mr, mf)?;
    tape.scale(v, -T::one())
}

/// Generator objective on discriminator logits of fake samples.
pub fn g_loss<T: Scalar>(tape: &mut Tape<T>, fake_logits: Var, mode: GeneratorLoss) -> Result<Var, TensorError> {
    match mode {
        GeneratorLoss::Paper => {
            let neg = tape.scale(fake_logits, -T::one())?;
            let l = tape.log_sigmoid(neg)?;
            tape.mean(l)
        }
        GeneratorLoss::NonSaturating => {
            let l = tape.log_sigmoid(fake_logits)?;
            let m = tape.mean(l)?;
            tape.scale(m, -T::one())
        }
    }
}

/// Discriminator loss and gradients for its tensors, with fakes held fixed.
pub fn discriminator_step_grads<T: Scalar>(
    d: &Discriminator<T>,
    real: &Matrix<T>,
    fake: &Matrix<T>,
    labels: &[usize],
) -> Result<(T, Vec<Matrix<T>>), TensorError> {
    let mut tape = Tape::new();
    let vars = d.net.record(&mut tape, true);
    let cond = tape.constant(one_hot(labels, d.num_classes));
    let rv = tape.constant(real.clone());
    let fv = tape.constant(fake.clone());
    let rl = d.forward(&mut tape, &vars, rv, cond)?;
    let fl = d.forward(&mut tape, &vars, fv, cond)?;
    let loss = d_loss(&mut tape, rl, fl)?;
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    let like = d.net.tensors();
    Ok((value, vars.iter().zip(like).map(|(&v, m)| grads.get_or_zeros(v, m)).collect()))
}

/// Generator loss and gradients for its tensors, through a fixed discriminator.
pub fn generator_step_grads<T: Scalar>(
    g: &Generator<T>,
    d: &Discriminator<T>,
    z: &Matrix<T>,
    labels: &[usize],
    mode: GeneratorLoss,
) -> Result<(T, Vec<Matrix<T>>), TensorError> {
    let mut tape = Tape::new();
    let gvars = g.net.record(&mut tape, true);
    let dvars = d.net.record(&mut tape, false);
    let cond = tape.constant(one_hot(labels, g.num_classes));
    let zv = tape.constant(z.clone());
    let fake = g.forward(&mut tape, &gvars, zv, cond)?;
    let fl = d.forward(&mut tape, &dvars, fake, cond)?;
    let loss = g_loss(&mut tape, fl, mode)?;
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    let like = g.net.tensors();
    Ok((value, gvars.iter().zip(like).map(|(&v, m)| grads.get_or_zeros(v, m)).collect()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochLosses {
    pub d_loss: f64,
    pub g_loss: f64,
}

#[derive(Clone, Debug)]
pub struct GanOutcome {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub history: Vec<EpochLosses>,
    /// Classes that had fewer than 2 real samples and were left out.
    pub skipped_classes: Vec<usize>,
}

/// Trains one conditional GAN on the real rows of `data`. An epoch is
/// `ceil(n / batch)` minibatches. Each minibatch runs
/// `k_disc` discriminator updates followed by one generator update; fake
/// labels follow the real batch.
pub fn train_gan(data: &EmbeddingDataset, cfg: &GanConfig, rng: &mut Rng) -> Result<GanOutcome, GanError> {
    cfg.validate()?;
    let classes = data.num_classes();
    let hist = data.real_histogram();
    let skipped_classes: Vec<usize> = (0..classes).filter(|&c| hist[c] < 2).collect();
    let mut pool: Vec<usize> =
        (0..data.len()).filter(|&i| !data.is_synthetic(i) && hist[data.labels()[i]] >= 2).collect();
    if pool.is_empty() {
        return Err(GanError::NoTrainingData);
    }

    let mut generator = Generator::<f32>::init(cfg.z_dim, classes, data.dim(), &cfg.hidden, rng);
    generator.trained = (0..classes).map(|c| hist[c] >= 2).collect();
    let mut discriminator = Discriminator::<f32>::init(classes, data.dim(), &cfg.hidden, rng);
    let adam = cfg.adam();
    let (mut g_state, mut d_state) = (AdamState::new(), AdamState::new());
    let mut history = Vec::with_capacity(cfg.epochs);

    let eligible: Vec<usize> = (0..classes).filter(|&c| hist[c] >= 2).collect();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for &i in &pool {
        members[data.labels()[i]].push(i);
    }
    let n_batches = pool.len().div_ceil(cfg.batch);
    for _ in 0..cfg.epochs {
        let batches: Vec<Vec<usize>> = if cfg.balanced_batches {
            (0..n_batches)
                .map(|_| {
                    (0..cfg.batch.min(pool.len()))
                        .map(|_| {
                            let m = &members[eligible[rng.random_range(0..eligible.len())]];
                            m[rng.random_range(0..m.len())]
                        })
                        .collect()
                })
                .collect()
        } else {
            pool.shuffle(rng);
            pool.chunks(cfg.batch).map(<[usize]>::to_vec).collect()
        };
        let (mut d_sum, mut g_sum, mut steps) = (0.0, 0.0, 0usize);
        for chunk in &batches {
            let real = data.features().select_rows(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels()[i]).collect();
            let mut d_last = 0.0;
            for _ in 0..cfg.k_disc {
                let z = generator.sample_noise(chunk.len(), rng);
                let fake = generator.apply(&z, &labels)?;
                let (l, grads) = discriminator_step_grads(&discriminator, &real, &fake, &labels)?;
                let grefs: Vec<&Matrix> = grads.iter().collect();
                adam_step(&mut discriminator.net.tensors_mut(), &grefs, &mut d_state, &adam)?;
                d_last = l as f64;
            }
            let z = generator.sample_noise(chunk.len(), rng);
            let (l, grads) = generator_step_grads(&generator, &discriminator, &z, &labels, cfg.loss)?;
            let grefs: Vec<&Matrix> = grads.iter().collect();
            adam_step(&mut generator.net.tensors_mut(), &grefs, &mut g_state, &adam)?;
            d_sum += d_last;
            g_sum += l as f64;
            steps += 1;
        }
        history.push(EpochLosses { d_loss: d_sum / steps as f64, g_loss: g_sum / steps as f64 });
    }
    Ok(GanOutcome { generator, discriminator, history, skipped_classes })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassAugmentation {
    pub class: usize,
    pub real: usize,
    pub target: usize,
    pub synthetic: usize,
    /// False when the cap or a skipped class kept the class below target.
    pub reached: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AugmentReport {
    pub classes: Vec<ClassAugmentation>,
}

impl AugmentReport {
    pub fn unreachable(&self) -> impl Iterator<Item = &ClassAugmentation> {
        self.classes.iter().filter(|c| !c.reached)
    }

    pub fn total_synthetic(&self) -> usize {
        self.classes.iter().map(|c| c.synthetic).sum()
    }
}

/// Upper median (`sorted[n/2]`) of the nonzero counts.
pub fn median_target(hist: &[usize]) -> usize {
    let mut nz: Vec<usize> = hist.iter().copied().filter(|&c| c > 0).collect();
    nz.sort_unstable();
    nz.get(nz.len() / 2).copied().unwrap_or(0)
}

/// Per-class synthetic counts the policy asks for, given real counts.
pub fn plan_augmentation(hist: &[usize], policy: &AugmentationPolicy, eligible: &[bool]) -> AugmentReport {
    let target = match policy.target {
        TargetRule::Median => median_target(hist),
        TargetRule::Fixed(n) => n,
    };
    let classes = hist
        .iter()
        .enumerate()
        .map(|(class, &real)| {
            let want = target.saturating_sub(real);
            let allowed = if real == 0 || !eligible[class] {
                0
            } else {
                policy.synthetic_cap(real).map_or(want, |cap| want.min(cap))
            };
            ClassAugmentation { class, real, target: target.max(real), synthetic: allowed, reached: allowed == want }
        })
        .collect();
    AugmentReport { classes }
}

/// Appends flagged synthetic rows, class by class in ascending order, after
/// the unchanged real rows.
pub fn augment(
    data: &EmbeddingDataset,
    generator: &Generator,
    policy: &AugmentationPolicy,
    rng: &mut Rng,
) -> Result<(EmbeddingDataset, AugmentReport), GanError> {
    if generator.num_classes != data.num_classes() || generator.dim != data.dim() {
        return Err(GanError::Config(format!(
            "generator ({} classes, dim {}) does not match dataset ({} classes, dim {})",
            generator.num_classes,
            generator.dim,
            data.num_classes(),
            data.dim()
        )));
    }
    let report = plan_augmentation(&data.real_histogram(), policy, &generator.trained);
    let mut out = data.clone();
    for c in &report.classes {
        if c.synthetic == 0 {
            continue;
        }
        let rows = generator.generate(c.class, c.synthetic, rng)?;
        let extra =
            EmbeddingDataset::with_flags(rows, vec![c.class; c.synthetic], vec![true; c.synthetic], data.num_classes())?;
        out.extend(&extra)?;
    }
    Ok((out, report))
}
