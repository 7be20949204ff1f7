//! Trainable attention adapter and the similarity head on top of it.
//!
//! For a batch of frozen embeddings `X` (one row per sample, row-vector
//! convention):
//!
//! ```text
//! A  = softmax((X Wq)(X Wk)^T / sqrt(dim)) (X Wv)
//! R1 = A + X
//! F  = ReLU(R1 W1 + b1) W2 + b2 + R1
//! V' = sigmoid(F Wg + bg) ⊙ F
//! V  = V' / ||V'||_row
//! logits = exp(log_s) * q(V U^T)
//! ```
//!
//! where `U` holds one frozen unit prototype per class and `q` is an optional
//! blockwise quantize-dequantize with a straight-through gradient.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::ClassPrototypes;
use crate::qlora::{fake_quantize, QloraError};
use crate::rng::{self, stream};
use crate::tensor::{Gradients, Matrix, Scalar, Tape, TensorError, Var};
use rand::Rng as _;

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("input width {found} does not match adapter dim {expected}")]
    InputWidth { expected: usize, found: usize },
    #[error("prototype width {found} does not match adapter dim {expected}")]
    PrototypeWidth { expected: usize, found: usize },
    #[error("invalid adapter config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Qlora(#[from] QloraError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub dim: usize,
    pub d_ff: usize,
    /// Uniform init half-width; `None` means `1/sqrt(dim)`.
    pub init_scale: Option<f64>,
    pub quantize_logits: bool,
    pub logit_bits: u8,
    pub logit_block_size: usize,
    pub sym_text_loss: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            d_ff: 64,
            init_scale: None,
            quantize_logits: true,
            logit_bits: 8,
            logit_block_size: 64,
            sym_text_loss: false,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<(), AdapterError> {
        if self.dim == 0 || self.d_ff == 0 {
            return Err(AdapterError::Config("dim and d_ff must be positive".into()));
        }
        if !matches!(self.logit_bits, 4 | 8) {
            return Err(AdapterError::Config("logit_bits must be 4 or 8".into()));
        }
        if self.logit_block_size == 0 {
            return Err(AdapterError::Config("logit_block_size must be positive".into()));
        }
        if let Some(s) = self.init_scale {
            if !(s.is_finite() && s > 0.0) {
                return Err(AdapterError::Config("init_scale must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn init_scale(&self) -> f64 {
        self.init_scale.unwrap_or(1.0 / (self.dim as f64).sqrt())
    }

    /// `3 dim² + dim·d_ff + d_ff + d_ff·dim + dim + dim² + dim + 1`
    pub fn param_count(&self) -> usize {
        let (d, f) = (self.dim, self.d_ff);
        3 * d * d + d * f + f + f * d + d + d * d + d + 1
    }

    /// Quantizer settings applied to the similarity logits, if enabled.
    pub fn logit_quantizer(&self) -> Option<(u8, usize)> {
        self.quantize_logits.then_some((self.logit_bits, self.logit_block_size))
    }
}

/// Whether a tensor is low-rank factored in deltas or carried dense.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Matrix,
    Dense,
}

/// Canonical tensor order used everywhere parameters are enumerated.
pub const PARAM_LAYOUT: [(&str, ParamKind); 10] = [
    ("wq", ParamKind::Matrix),
    ("wk", ParamKind::Matrix),
    ("wv", ParamKind::Matrix),
    ("w1", ParamKind::Matrix),
    ("b1", ParamKind::Dense),
    ("w2", ParamKind::Matrix),
    ("b2", ParamKind::Dense),
    ("wg", ParamKind::Matrix),
    ("bg", ParamKind::Dense),
    ("log_s", ParamKind::Dense),
];

/// Initial logit scale `s = 10`.
pub const INITIAL_LOG_SCALE: f64 = std::f64::consts::LN_10;

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams<T: Scalar = f32> {
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub w1: Matrix<T>,
    pub b1: Matrix<T>,
    pub w2: Matrix<T>,
    pub b2: Matrix<T>,
    pub wg: Matrix<T>,
    pub bg: Matrix<T>,
    pub log_s: Matrix<T>,
}

impl<T: Scalar> AdapterParams<T> {
    pub fn zeros(dim: usize, d_ff: usize) -> Self {
        Self {
            wq: Matrix::zeros(dim, dim),
            wk: Matrix::zeros(dim, dim),
            wv: Matrix::zeros(dim, dim),
            w1: Matrix::zeros(dim, d_ff),
            b1: Matrix::zeros(1, d_ff),
            w2: Matrix::zeros(d_ff, dim),
            b2: Matrix::zeros(1, dim),
            wg: Matrix::zeros(dim, dim),
            bg: Matrix::zeros(1, dim),
            log_s: Matrix::zeros(1, 1),
        }
    }

    /// Weights uniform in `±init_scale`, biases zero, `s = 10`.
    pub fn init(cfg: &AdapterConfig, seed: u64) -> Self {
        let mut rng = rng::derive(seed, stream::ADAPTER_INIT, &[]);
        let a = cfg.init_scale();
        let mut p = Self::zeros(cfg.dim, cfg.d_ff);
        for ((_, kind), m) in PARAM_LAYOUT.iter().zip(p.tensors_mut()) {
            if *kind == ParamKind::Matrix {
                for v in m.data_mut() {
                    *v = T::from_wide(rng.random_range(-a..=a));
                }
            }
        }
        p.log_s = Matrix::scalar(T::from_wide(INITIAL_LOG_SCALE));
        p
    }

    pub fn dim(&self) -> usize {
        self.wq.rows()
    }

    pub fn d_ff(&self) -> usize {
        self.w1.cols()
    }

    pub fn tensors(&self) -> [&Matrix<T>; 10] {
        [&self.wq, &self.wk, &self.wv, &self.w1, &self.b1, &self.w2, &self.b2, &self.wg, &self.bg, &self.log_s]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix<T>; 10] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.wg,
            &mut self.bg,
            &mut self.log_s,
        ]
    }

    pub fn tensor(&self, name: &str) -> Option<&Matrix<T>> {
        let i = PARAM_LAYOUT.iter().position(|(n, _)| *n == name)?;
        Some(self.tensors()[i])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Matrix<T>> {
        let i = PARAM_LAYOUT.iter().position(|(n, _)| *n == name)?;
        let [a, b, c, d, e, f, g, h, k, l] = self.tensors_mut();
        let arr = [a, b, c, d, e, f, g, h, k, l];
        arr.into_iter().nth(i)
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|m| m.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|m| m.is_finite())
    }

    pub fn logit_scale(&self) -> f64 {
        self.log_s.data()[0].to_wide().exp()
    }

    pub fn cast<U: Scalar>(&self) -> AdapterParams<U> {
        AdapterParams {
            wq: self.wq.cast(),
            wk: self.wk.cast(),
            wv: self.wv.cast(),
            w1: self.w1.cast(),
            b1: self.b1.cast(),
            w2: self.w2.cast(),
            b2: self.b2.cast(),
            wg: self.wg.cast(),
            bg: self.bg.cast(),
            log_s: self.log_s.cast(),
        }
    }
}

/// Tape handles for one set of adapter weights.
#[derive(Clone, Copy, Debug)]
pub struct AdapterVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub wg: Var,
    pub bg: Var,
    pub log_s: Var,
}

impl AdapterVars {
    fn record<T: Scalar>(tape: &mut Tape<T>, p: &AdapterParams<T>, tracked: bool) -> Self {
        let mut put = |m: &Matrix<T>| if tracked { tape.param(m.clone()) } else { tape.constant(m.clone()) };
        Self {
            wq: put(&p.wq),
            wk: put(&p.wk),
            wv: put(&p.wv),
            w1: put(&p.w1),
            b1: put(&p.b1),
            w2: put(&p.w2),
            b2: put(&p.b2),
            wg: put(&p.wg),
            bg: put(&p.bg),
            log_s: put(&p.log_s),
        }
    }

    /// Every tensor becomes a trainable leaf.
    pub fn params<T: Scalar>(tape: &mut Tape<T>, p: &AdapterParams<T>) -> Self {
        Self::record(tape, p, true)
    }

    /// Every tensor is recorded as a constant.
    pub fn constants<T: Scalar>(tape: &mut Tape<T>, p: &AdapterParams<T>) -> Self {
        Self::record(tape, p, false)
    }

    /// Handles in [`PARAM_LAYOUT`] order.
    pub fn from_array(v: [Var; 10]) -> Self {
        let [wq, wk, wv, w1, b1, w2, b2, wg, bg, log_s] = v;
        Self { wq, wk, wv, w1, b1, w2, b2, wg, bg, log_s }
    }

    pub fn as_array(&self) -> [Var; 10] {
        [self.wq, self.wk, self.wv, self.w1, self.b1, self.w2, self.b2, self.wg, self.bg, self.log_s]
    }

    /// Collects gradients in [`PARAM_LAYOUT`] order; untouched tensors get zeros.
    pub fn gradients<T: Scalar>(&self, grads: &Gradients<T>, like: &AdapterParams<T>) -> AdapterParams<T> {
        let vars = self.as_array();
        let like = like.tensors();
        let g = |i: usize| grads.get_or_zeros(vars[i], like[i]);
        AdapterParams {
            wq: g(0),
            wk: g(1),
            wv: g(2),
            w1: g(3),
            b1: g(4),
            w2: g(5),
            b2: g(6),
            wg: g(7),
            bg: g(8),
            log_s: g(9),
        }
    }
}

fn check_width<T: Scalar>(tape: &Tape<T>, x: Var, dim: usize) -> Result<(), AdapterError> {
    let found = tape.value(x).cols();
    if found != dim {
        return Err(AdapterError::InputWidth { expected: dim, found });
    }
    Ok(())
}

fn dim_of<T: Scalar>(tape: &Tape<T>, v: &AdapterVars) -> usize {
    tape.value(v.wq).rows()
}

/// `softmax(Q K^T / sqrt(dim)) V` with attention across the rows of `x`.
pub fn attention_forward<T: Scalar>(tape: &mut Tape<T>, v: &AdapterVars, x: Var) -> Result<Var, AdapterError> {
    let dim = dim_of(tape, v);
    check_width(tape, x, dim)?;
    let q = tape.matmul(x, v.wq)?;
    let k = tape.matmul(x, v.wk)?;
    let val = tape.matmul(x, v.wv)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, T::from_wide(1.0 / (dim as f64).sqrt()))?;
    let weights = tape.softmax_rows(scaled)?;
    Ok(tape.matmul(weights, val)?)
}

/// `ReLU(a W1 + b1) W2 + b2`
pub fn ffn_forward<T: Scalar>(tape: &mut Tape<T>, v: &AdapterVars, a: Var) -> Result<Var, AdapterError> {
    check_width(tape, a, dim_of(tape, v))?;
    let h = tape.matmul(a, v.w1)?;
    let h = tape.add_row(h, v.b1)?;
    let h = tape.relu(h)?;
    let o = tape.matmul(h, v.w2)?;
    Ok(tape.add_row(o, v.b2)?)
}

/// `sigmoid(f Wg + bg) ⊙ f`
pub fn refine<T: Scalar>(tape: &mut Tape<T>, v: &AdapterVars, f: Var) -> Result<Var, AdapterError> {
    check_width(tape, f, dim_of(tape, v))?;
    let g = tape.matmul(f, v.wg)?;
    let g = tape.add_row(g, v.bg)?;
    let gate = tape.sigmoid(g)?;
    Ok(tape.mul(gate, f)?)
}

/// Full adapter: attention and FFN with residuals, gate, row normalization.
pub fn adapter_forward<T: Scalar>(tape: &mut Tape<T>, v: &AdapterVars, x: Var) -> Result<Var, AdapterError> {
    let a = attention_forward(tape, v, x)?;
    let r1 = tape.add(a, x)?;
    let f = ffn_forward(tape, v, r1)?;
    let f = tape.add(f, r1)?;
    let refined = refine(tape, v, f)?;
    Ok(tape.normalize_rows(refined)?)
}

/// Records the transposed prototype matrix as a constant.
pub fn prototype_var<T: Scalar>(tape: &mut Tape<T>, protos: &ClassPrototypes) -> Var {
    tape.constant(protos.matrix().transpose().cast())
}

/// `exp(log_s) * q(V_opt U^T)`; `quantizer` is `(bits, block_size)`.
pub fn logits<T: Scalar>(
    tape: &mut Tape<T>,
    v: &AdapterVars,
    v_opt: Var,
    protos_t: Var,
    quantizer: Option<(u8, usize)>,
) -> Result<Var, AdapterError> {
    let (pd, vd) = (tape.value(protos_t).rows(), tape.value(v_opt).cols());
    if pd != vd {
        return Err(AdapterError::PrototypeWidth { expected: vd, found: pd });
    }
    let raw = tape.matmul(v_opt, protos_t)?;
    let q = match quantizer {
        Some((bits, block)) => tape.straight_through(raw, |m| {
            Ok::<_, AdapterError>(fake_quantize(&m.cast::<f32>(), bits, block)?.cast())
        })?,
        None => raw,
    };
    Ok(tape.scale_by_exp(q, v.log_s)?)
}

/// `ℓ_vis = CE(logits, labels)`, plus `ℓ_text` on the transposed logits when
/// `sym_text_loss` is set. Each class present in the batch uses the first
/// sample carrying it as the target; absent classes are skipped.
pub fn adapter_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[usize],
    sym_text_loss: bool,
) -> Result<Var, AdapterError> {
    let vis = tape.cross_entropy(logits, labels)?;
    if !sym_text_loss {
        return Ok(vis);
    }
    let classes = tape.value(logits).cols();
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for c in 0..classes {
        if let Some(i) = labels.iter().position(|&l| l == c) {
            rows.push(c);
            targets.push(i);
        }
    }
    let lt = tape.transpose(logits)?;
    let present = tape.select_rows(lt, &rows)?;
    let text = tape.cross_entropy(present, &targets)?;
    Ok(tape.add(vis, text)?)
}

/// Loss and per-tensor gradients for dense (non-LoRA) parameters.
pub fn loss_and_gradients<T: Scalar>(
    params: &AdapterParams<T>,
    x: &Matrix<T>,
    labels: &[usize],
    protos: &ClassPrototypes,
    cfg: &AdapterConfig,
) -> Result<(T, AdapterParams<T>), AdapterError> {
    let mut tape = Tape::new();
    let vars = AdapterVars::params(&mut tape, params);
    let xv = tape.constant(x.clone());
    let pv = prototype_var(&mut tape, protos);
    let v_opt = adapter_forward(&mut tape, &vars, xv)?;
    let lg = logits(&mut tape, &vars, v_opt, pv, cfg.logit_quantizer())?;
    let loss = adapter_loss(&mut tape, lg, labels, cfg.sym_text_loss)?;
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    Ok((value, vars.gradients(&grads, params)))
}

/// Inference logits for a batch, with or without logit quantization.
pub fn predict_logits(
    params: &AdapterParams,
    x: &Matrix,
    protos: &ClassPrototypes,
    quantizer: Option<(u8, usize)>,
) -> Result<Matrix, AdapterError> {
    let mut tape = Tape::new();
    let vars = AdapterVars::constants(&mut tape, params);
    let xv = tape.constant(x.clone());
    let pv = prototype_var(&mut tape, protos);
    let v_opt = adapter_forward(&mut tape, &vars, xv)?;
    let lg = logits(&mut tape, &vars, v_opt, pv, quantizer)?;
    Ok(tape.value(lg).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::make_prototypes;

    fn cfg(dim: usize, d_ff: usize) -> AdapterConfig {
        AdapterConfig { dim, d_ff, quantize_logits: false, ..AdapterConfig::default() }
    }

    fn input(rows: usize, cols: usize, salt: f64) -> Matrix<f64> {
        Matrix::from_fn(rows, cols, |i, j| ((i * 7 + j * 3) as f64 * 0.37 + salt).sin())
    }

    #[test]
    fn param_count_matches_formula() {
        let c = cfg(8, 12);
        let p = AdapterParams::<f32>::init(&c, 4);
        assert_eq!(p.num_params(), c.param_count());
        assert_eq!(c.param_count(), 3 * 64 + 96 + 12 + 96 + 8 + 64 + 8 + 1);
        assert!((p.logit_scale() - 10.0).abs() < 1e-5);
        assert!(p.b1.data().iter().all(|&v| v == 0.0));
        let bound = c.init_scale() as f32;
        assert!(p.wq.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn attention_single_row_is_value_projection() {
        let p = AdapterParams::<f64>::init(&cfg(4, 4).clone(), 9).cast::<f64>();
        let mut t = Tape::new();
        let v = AdapterVars::constants(&mut t, &p);
        let x = input(1, 4, 0.2);
        let xv = t.constant(x.clone());
        let out = attention_forward(&mut t, &v, xv).unwrap();
        let expected = x.matmul(&p.wv).unwrap();
        for (a, b) in t.value(out).data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_zero_scores_average_values() {
        let mut p = AdapterParams::<f64>::init(&cfg(4, 4), 2);
        p.wq = Matrix::zeros(4, 4);
        p.wk = Matrix::zeros(4, 4);
        let x = input(3, 4, 1.0);
        let mut t = Tape::new();
        let v = AdapterVars::constants(&mut t, &p);
        let xv = t.constant(x.clone());
        let out = attention_forward(&mut t, &v, xv).unwrap();
        let vals = x.matmul(&p.wv).unwrap();
        let mean = vals.sum_rows().scale(1.0 / 3.0);
        for r in 0..3 {
            for (a, b) in t.value(out).row(r).iter().zip(mean.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ffn_special_cases() {
        let mut p = AdapterParams::<f64>::zeros(3, 3);
        p.b2 = Matrix::from_rows(&[vec![0.5, -1.0, 2.0]]).unwrap();
        let x = input(2, 3, 0.0);
        let mut t = Tape::new();
        let v = AdapterVars::constants(&mut t, &p);
        let xv = t.constant(x.clone());
        let out = ffn_forward(&mut t, &v, xv).unwrap();
        for r in 0..2 {
            assert_eq!(t.value(out).row(r), p.b2.data());
        }

        let mut p = AdapterParams::<f64>::zeros(3, 3);
        p.w1 = Matrix::identity(3);
        p.w2 = Matrix::identity(3);
        let x = input(2, 3, 0.0).map(f64::abs);
        let mut t = Tape::new();
        let v = AdapterVars::constants(&mut t, &p);
        let xv = t.constant(x.clone());
        let out = ffn_forward(&mut t, &v, xv).unwrap();
        assert_eq!(t.value(out), &x);
    }

    #[test]
    fn refine_gate_cases() {
        let p = AdapterParams::<f64>::zeros(3, 2);
        let f = input(2, 3, 0.4);
        let mut t = Tape::new();
        let v = AdapterVars::constants(&mut t, &p);
        let fv = t.constant(f.clone());
        let out = refine(&mut t, &v, fv).unwrap();
        assert_eq!(t.value(out), &f.scale(0.5));

        let mut p = AdapterParams::<f64>::zeros(3, 2);
        p.bg = Matrix::filled(1, 3, 20.0);
        let mut t = Tape::new();
        let v = AdapterVars::constants(&mut t, &p);
        let fv = t.constant(f.clone());
        let out = refine(&mut t, &v, fv).unwrap();
        for (a, b) in t.value(out).data().iter().zip(f.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_rows_are_unit_norm_even_with_zero_weights() {
        let p = AdapterParams::<f32>::zeros(6, 5);
        let x = input(4, 6, 0.3).cast::<f32>();
        let mut t = Tape::new();
        let v = AdapterVars::constants(&mut t, &p);
        let xv = t.constant(x.clone());
        let out = adapter_forward(&mut t, &v, xv).unwrap();
        let o = t.value(out);
        assert!(o.is_finite());
        // zero weights: A = 0, F = X, gate = 1/2 -> normalize(X / 2) = normalize(X)
        for r in 0..4 {
            let n: f64 = x.row(r).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            for (a, b) in o.row(r).iter().zip(x.row(r)) {
                assert!((*a as f64 - *b as f64 / n).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_embedding_is_rejected_with_row() {
        let p = AdapterParams::<f32>::zeros(3, 3);
        let mut x = Matrix::filled(2, 3, 1.0f32);
        x.row_mut(1).fill(0.0);
        let mut t = Tape::new();
        let v = AdapterVars::constants(&mut t, &p);
        let xv = t.constant(x);
        let err = adapter_forward(&mut t, &v, xv).unwrap_err();
        assert!(matches!(err, AdapterError::Tensor(TensorError::ZeroNormRow { row: 1 })));
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let p = AdapterParams::<f32>::zeros(3, 3);
        let mut t = Tape::new();
        let v = AdapterVars::constants(&mut t, &p);
        let xv = t.constant(Matrix::filled(2, 4, 1.0));
        assert!(matches!(
            attention_forward(&mut t, &v, xv),
            Err(AdapterError::InputWidth { expected: 3, found: 4 })
        ));
    }

    #[test]
    fn prototype_row_gives_max_logit() {
        let protos = make_prototypes(4, 8, 1).unwrap();
        let mut p = AdapterParams::<f32>::zeros(8, 4);
        p.log_s = Matrix::scalar(0.0);
        let mut t = Tape::new();
        let v = AdapterVars::constants(&mut t, &p);
        let v_opt = t.constant(protos.matrix().select_rows(&[2]));
        let pv = prototype_var(&mut t, &protos);
        let lg = logits(&mut t, &v, v_opt, pv, None).unwrap();
        let row = t.value(lg).row(0).to_vec();
        assert!((row[2] - 1.0).abs() < 1e-6);
        assert!(row.iter().enumerate().all(|(j, &x)| j == 2 || x < row[2]));
    }

    #[test]
    fn loss_uniform_and_saturated() {
        let mut t = Tape::<f64>::new();
        let lg = t.constant(Matrix::zeros(3, 5));
        let l = adapter_loss(&mut t, lg, &[0, 1, 4], false).unwrap();
        assert!((t.value(l).data()[0] - 5f64.ln()).abs() < 1e-12);

        let mut t = Tape::<f64>::new();
        let mut m = Matrix::filled(2, 2, -20.0);
        m.set(0, 0, 20.0);
        m.set(1, 1, 20.0);
        let lg = t.constant(m);
        let l = adapter_loss(&mut t, lg, &[0, 1], true).unwrap();
        assert!(t.value(l).data()[0] < 1e-15);
    }
}
