//! Shared helpers for the integration tests.
#![allow(dead_code)]

use std::io::Write;

use fedadapter::tensor::Matrix;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-3;
/// Largest accepted relative error between analytic and numeric gradients.
pub const FD_TOLERANCE: f64 = 1e-3;

/// Numeric gradient of `f` with respect to the tensor picked by `select`,
/// by central differences of width `2h`.
pub fn numeric_gradient<P: Clone>(
    params: &P,
    select: impl Fn(&mut P) -> &mut Matrix<f64>,
    f: impl Fn(&P) -> f64,
    h: f64,
) -> Matrix<f64> {
    let mut probe = params.clone();
    let (rows, cols) = select(&mut probe).shape();
    let mut out = Matrix::zeros(rows, cols);
    for i in 0..rows * cols {
        let orig = select(&mut probe).data()[i];
        select(&mut probe).data_mut()[i] = orig + h;
        let up = f(&probe);
        select(&mut probe).data_mut()[i] = orig - h;
        let down = f(&probe);
        select(&mut probe).data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    out
}

/// `||a - n|| / max(||a||, ||n||)` over a whole tensor; zero when both vanish.
pub fn relative_error(analytic: &Matrix<f64>, numeric: &Matrix<f64>) -> f64 {
    let norm = |m: &Matrix<f64>| m.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff: f64 = analytic.data().iter().zip(numeric.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Prints one acceptance line and returns whether it passed.
/// Writes to the raw stdout handle so the line survives libtest capture.
pub fn report(id: usize, name: &str, pass: bool, detail: &str) -> bool {
    let line = format!("criterion {id} [{}] {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes()).and_then(|_| out.flush());
    pass
}
