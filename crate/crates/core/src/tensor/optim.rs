use super::{Matrix, Scalar, TensorError};

fn check_shapes<T: Scalar>(params: &[&mut Matrix<T>], grads: &[&Matrix<T>]) -> Result<(), TensorError> {
    if params.len() != grads.len() {
        return Err(TensorError::ParamCount { params: params.len(), grads: grads.len() });
    }
    for (p, g) in params.iter().zip(grads) {
        p.expect_same_shape("optimizer", g)?;
    }
    Ok(())
}

/// Plain gradient descent: `w -= lr * g`.
pub fn sgd_step<T: Scalar>(
    params: &mut [&mut Matrix<T>],
    grads: &[&Matrix<T>],
    lr: T,
) -> Result<(), TensorError> {
    check_shapes(params, grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        p.axpy(-lr, g)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// Bias-corrected Adam update. Moments are kept in 64-bit.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Matrix<T>],
    grads: &[&Matrix<T>],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<(), TensorError> {
    check_shapes(params, grads)?;
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
        state.v = state.m.clone();
    } else if state.m.len() != params.len()
        || state.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len())
    {
        return Err(TensorError::ParamCount { params: params.len(), grads: state.m.len() });
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gj = gj.to_wide();
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *w = T::from_wide(w.to_wide() - cfg.lr * mhat / (vhat.sqrt() + cfg.eps));
        }
    }
    Ok(())
}
