//! Reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every primitive applied during one forward pass in
//! topological order; [`Tape::backward`] replays it in reverse once. Build a
//! fresh tape (or [`Tape::reset`]) for each forward pass.

use super::{Matrix, Scalar, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    Transpose(Var),
    NormalizeRows { x: Var, norms: Vec<T> },
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Matrix<T> },
    LogSigmoid(Var),
    ScaleByExp { x: Var, log_s: Var },
    StraightThrough(Var),
    ConcatCols(Var, Var),
    SelectRows { x: Var, idx: Vec<usize> },
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Matrix<T>,
    op: Op<T>,
    param: bool,
    requires_grad: bool,
}

/// Operation recorder for one forward/backward pass.
#[derive(Debug)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward traversal.
#[derive(Debug)]
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Option<Matrix<T>>>,
    visits: Vec<u32>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a tracked parameter; `None` if it did not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but returns zeros shaped like `like` when absent.
    pub fn get_or_zeros(&self, v: Var, like: &Matrix<T>) -> Matrix<T> {
        self.get(v).cloned().unwrap_or_else(|| Matrix::zeros(like.rows(), like.cols()))
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// How many times the traversal visited parameter `v`.
    pub fn visits(&self, v: Var) -> u32 {
        self.visits.get(v.0).copied().unwrap_or(0)
    }
}

fn log_sigmoid<T: Scalar>(x: T) -> T {
    // log σ(x) = min(x, 0) - ln(1 + e^{-|x|})
    let v = x.to_wide();
    T::from_wide(v.min(0.0) - (-v.abs()).exp().ln_1p())
}

fn sigmoid<T: Scalar>(x: T) -> T {
    let v = x.to_wide();
    let s = if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    };
    T::from_wide(s)
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows<T: Scalar>(x: &Matrix<T>) -> Result<Matrix<T>, TensorError> {
    if x.is_empty() {
        return Err(TensorError::Empty { op: "softmax_rows" });
    }
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.to_wide()));
        let mut total = 0.0f64;
        let mut exps = Vec::with_capacity(row.len());
        for v in row.iter() {
            let e = (v.to_wide() - max).exp();
            total += e;
            exps.push(e);
        }
        for (dst, e) in row.iter_mut().zip(exps) {
            *dst = T::from_wide(e / total);
        }
    }
    Ok(out)
}

/// Mean negative log-likelihood plus the softmax probabilities it used.
fn cross_entropy_value<T: Scalar>(
    logits: &Matrix<T>,
    labels: &[usize],
) -> Result<(T, Matrix<T>), TensorError> {
    if labels.len() != logits.rows() {
        return Err(TensorError::LabelCount { rows: logits.rows(), labels: labels.len() });
    }
    if logits.is_empty() {
        return Err(TensorError::Empty { op: "cross_entropy" });
    }
    let mut total = 0.0f64;
    for (row, &label) in labels.iter().enumerate() {
        if label >= logits.cols() {
            return Err(TensorError::LabelOutOfRange { row, label, classes: logits.cols() });
        }
        let vals = logits.row(row);
        let max = vals.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.to_wide()));
        let lse = vals.iter().map(|v| (v.to_wide() - max).exp()).sum::<f64>().ln() + max;
        total += lse - vals[label].to_wide();
    }
    let probs = softmax_rows(logits)?;
    Ok((T::from_wide(total / labels.len() as f64), probs))
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), consumed: false }
    }

    /// Clears all nodes so the tape can record a new pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Matrix<T>) -> Var {
        self.push_raw(value, Op::Leaf, true, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push_raw(value, Op::Leaf, false, false)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    fn push_raw(&mut self, value: Matrix<T>, op: Op<T>, param: bool, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, param, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<(), TensorError> {
        if v.0 >= self.nodes.len() {
            return Err(TensorError::ForeignVar(v.0));
        }
        Ok(())
    }

    fn push(&mut self, op_name: &'static str, value: Matrix<T>, op: Op<T>) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = self.operands(&op).iter().any(|o| self.nodes[o.0].requires_grad);
        Ok(self.push_raw(value, op, false, requires_grad))
    }

    fn operands(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::ConcatCols(a, b) => vec![*a, *b],
            Op::ScaleByExp { x, log_s } => vec![*x, *log_s],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::SoftmaxRows(a)
            | Op::Transpose(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::LogSigmoid(a)
            | Op::StraightThrough(a) => vec![*a],
            Op::NormalizeRows { x, .. } | Op::SelectRows { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.check(a)?;
        self.check(b)?;
        let v = self.value(a).matmul(self.value(b))?;
        self.push("matmul", v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.check(a)?;
        self.check(b)?;
        let v = self.value(a).add(self.value(b))?;
        self.push("add", v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.check(a)?;
        self.check(b)?;
        let v = self.value(a).sub(self.value(b))?;
        self.push("sub", v, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.check(a)?;
        self.check(b)?;
        let v = self.value(a).hadamard(self.value(b))?;
        self.push("mul", v, Op::Mul(a, b))
    }

    /// Broadcast-adds a 1 x cols bias to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        self.check(x)?;
        self.check(bias)?;
        let v = self.value(x).add_row(self.value(bias))?;
        self.push("add_row", v, Op::AddRow(x, bias))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var, TensorError> {
        self.check(x)?;
        let v = self.value(x).scale(s);
        self.push("scale", v, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.check(x)?;
        let v = self.value(x).map(|e| if e > T::zero() { e } else { T::zero() });
        self.push("relu", v, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        self.check(x)?;
        let v = self.value(x).map(sigmoid);
        self.push("sigmoid", v, Op::Sigmoid(x))
    }

    /// Elementwise numerically stable `log σ(x)`.
    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        self.check(x)?;
        let v = self.value(x).map(log_sigmoid);
        self.push("log_sigmoid", v, Op::LogSigmoid(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        self.check(x)?;
        let v = softmax_rows(self.value(x))?;
        self.push("softmax_rows", v, Op::SoftmaxRows(x))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        self.check(x)?;
        let v = self.value(x).transpose();
        self.push("transpose", v, Op::Transpose(x))
    }

    /// Divides every row by its L2 norm. A zero row is rejected with its index.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        self.check(x)?;
        let src = self.value(x);
        let mut out = src.clone();
        let mut norms = Vec::with_capacity(src.rows());
        for r in 0..src.rows() {
            let n = src.row(r).iter().map(|v| v.to_wide() * v.to_wide()).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(TensorError::ZeroNormRow { row: r });
            }
            for v in out.row_mut(r) {
                *v = T::from_wide(v.to_wide() / n);
            }
            norms.push(T::from_wide(n));
        }
        self.push("normalize_rows", out, Op::NormalizeRows { x, norms })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        self.check(x)?;
        let v = Matrix::scalar(self.value(x).sum());
        self.push("sum", v, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        self.check(x)?;
        let m = self.value(x);
        if m.is_empty() {
            return Err(TensorError::Empty { op: "mean" });
        }
        let v = Matrix::scalar(T::from_wide(m.sum().to_wide() / m.len() as f64));
        self.push("mean", v, Op::Mean(x))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        self.check(logits)?;
        let (loss, probs) = cross_entropy_value(self.value(logits), labels)?;
        self.push(
            "cross_entropy",
            Matrix::scalar(loss),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
        )
    }

    /// `exp(log_s) * x` for a 1x1 `log_s`.
    pub fn scale_by_exp(&mut self, x: Var, log_s: Var) -> Result<Var, TensorError> {
        self.check(x)?;
        self.check(log_s)?;
        let ls = self.value(log_s);
        let s = ls.as_scalar().ok_or(TensorError::ShapeMismatch {
            op: "scale_by_exp",
            left: self.value(x).shape(),
            right: ls.shape(),
        })?;
        let v = self.value(x).scale(s.exp());
        self.push("scale_by_exp", v, Op::ScaleByExp { x, log_s })
    }

    /// Replaces the value of `x` with `f(x)` while passing gradients through
    /// unchanged (identity estimator).
    pub fn straight_through<E: From<TensorError>>(
        &mut self,
        x: Var,
        f: impl FnOnce(&Matrix<T>) -> Result<Matrix<T>, E>,
    ) -> Result<Var, E> {
        self.check(x)?;
        let src = self.value(x);
        let v = f(src)?;
        src.expect_same_shape("straight_through", &v)?;
        Ok(self.push("straight_through", v, Op::StraightThrough(x))?)
    }

    /// Rows of `x` at `idx`, in that order; repeats are allowed.
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, TensorError> {
        self.check(x)?;
        let src = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= src.rows()) {
            return Err(TensorError::RowOutOfRange { index: bad, rows: src.rows() });
        }
        let v = src.select_rows(idx);
        self.push("select_rows", v, Op::SelectRows { x, idx: idx.to_vec() })
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.check(a)?;
        self.check(b)?;
        let v = self.value(a).concat_cols(self.value(b))?;
        self.push("concat_cols", v, Op::ConcatCols(a, b))
    }

    /// Backpropagates from a 1x1 `loss`. A tape can be traversed once; call
    /// [`reset`](Self::reset) before recording the next pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>, TensorError> {
        if self.consumed {
            return Err(TensorError::StaleTape);
        }
        self.check(loss)?;
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(TensorError::NonScalarRoot { shape });
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Matrix<T>>> = (0..n).map(|_| None).collect();
        let mut visits = vec![0u32; n];
        grads[loss.0] = Some(Matrix::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.param {
                visits[idx] += 1;
                grads[idx] = Some(g);
                continue;
            }
            if !node.requires_grad {
                continue;
            }
            for (operand, contribution) in self.vjp(idx, &g)? {
                if !self.nodes[operand.0].requires_grad {
                    continue;
                }
                match &mut grads[operand.0] {
                    Some(acc) => acc.add_assign(&contribution)?,
                    slot @ None => *slot = Some(contribution),
                }
            }
        }

        // Only parameters keep their gradients.
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.param {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads, visits })
    }

    /// Vector-Jacobian products of node `idx` for upstream gradient `g`.
    fn vjp(&self, idx: usize, g: &Matrix<T>) -> Result<Vec<(Var, Matrix<T>)>, TensorError> {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let mut out = Vec::with_capacity(2);
                if needs(*a) {
                    out.push((*a, g.matmul(&val(*b).transpose())?));
                }
                if needs(*b) {
                    out.push((*b, val(*a).transpose().matmul(g)?));
                }
                out
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-T::one()))],
            Op::Mul(a, b) => vec![(*a, g.hadamard(val(*b))?), (*b, g.hadamard(val(*a))?)],
            Op::AddRow(x, bias) => vec![(*x, g.clone()), (*bias, g.sum_rows())],
            Op::Scale(x, s) => vec![(*x, g.scale(*s))],
            Op::Relu(x) => {
                let gx = g.zip_map(val(*x), |gi, xi| if xi > T::zero() { gi } else { T::zero() })?;
                vec![(*x, gx)]
            }
            Op::Sigmoid(x) => {
                let gx = g.zip_map(&node.value, |gi, s| gi * s * (T::one() - s))?;
                vec![(*x, gx)]
            }
            Op::LogSigmoid(x) => {
                // d/dx log σ(x) = σ(-x)
                let gx = g.zip_map(val(*x), |gi, xi| gi * sigmoid(-xi))?;
                vec![(*x, gx)]
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut gx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.to_wide() * b.to_wide()).sum();
                    for ((dst, &yi), &gi) in gx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *dst = T::from_wide(yi.to_wide() * (gi.to_wide() - dot));
                    }
                }
                vec![(*x, gx)]
            }
            Op::Transpose(x) => vec![(*x, g.transpose())],
            Op::NormalizeRows { x, norms } => {
                let y = &node.value;
                let mut gx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.to_wide() * b.to_wide()).sum();
                    let n = norms[r].to_wide();
                    for ((dst, &yi), &gi) in gx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *dst = T::from_wide((gi.to_wide() - yi.to_wide() * dot) / n);
                    }
                }
                vec![(*x, gx)]
            }
            Op::Sum(x) => {
                let gs = g.data()[0];
                let src = val(*x);
                vec![(*x, Matrix::filled(src.rows(), src.cols(), gs))]
            }
            Op::Mean(x) => {
                let src = val(*x);
                let gs = T::from_wide(g.data()[0].to_wide() / src.len() as f64);
                vec![(*x, Matrix::filled(src.rows(), src.cols(), gs))]
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let gs = g.data()[0].to_wide() / labels.len() as f64;
                let mut gx = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    let v = gx.get(r, l);
                    gx.set(r, l, v - T::one());
                }
                vec![(*logits, gx.map(|v| T::from_wide(v.to_wide() * gs)))]
            }
            Op::ScaleByExp { x, log_s } => {
                let s = val(*log_s).data()[0].exp();
                let gx = g.scale(s);
                let dot: f64 =
                    g.data().iter().zip(node.value.data()).map(|(a, b)| a.to_wide() * b.to_wide()).sum();
                vec![(*x, gx), (*log_s, Matrix::scalar(T::from_wide(dot)))]
            }
            Op::StraightThrough(x) => vec![(*x, g.clone())],
            Op::ConcatCols(a, b) => {
                let ca = val(*a).cols();
                let cb = val(*b).cols();
                let mut ga = Matrix::zeros(g.rows(), ca);
                let mut gb = Matrix::zeros(g.rows(), cb);
                for r in 0..g.rows() {
                    let row = g.row(r);
                    ga.row_mut(r).copy_from_slice(&row[..ca]);
                    gb.row_mut(r).copy_from_slice(&row[ca..]);
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::SelectRows { x, idx } => {
                let src = val(*x);
                let mut gx = Matrix::zeros(src.rows(), src.cols());
                for (r, &i) in idx.iter().enumerate() {
                    for (dst, &gi) in gx.row_mut(i).iter_mut().zip(g.row(r)) {
                        *dst = *dst + gi;
                    }
                }
                vec![(*x, gx)]
            }
        };
        Ok(out)
    }
}

/// Mean cross-entropy without recording anything.
pub fn cross_entropy<T: Scalar>(logits: &Matrix<T>, labels: &[usize]) -> Result<T, TensorError> {
    cross_entropy_value(logits, labels).map(|(l, _)| l)
}
