//! Cholesky factorization with escalating diagonal jitter.

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{Error, Result};

/// Relative jitter start and ceiling, scaled by `trace / n`.
const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-4;

/// Factor a symmetric matrix, retrying with diagonal jitter
/// `1e-10 * trace/n` doubled up to `1e-4 * trace/n`. Failure beyond the
/// ceiling is a hard error carrying the matrix diagnostics; jitter is never
/// applied silently — the amount used is returned.
pub fn cholesky_with_jitter(m: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = m.nrows();
    if n == 0 || m.ncols() != n {
        return Err(Error::invalid("cholesky of empty or non-square matrix"));
    }
    if let Some(chol) = Cholesky::new(m.clone()) {
        return Ok((chol, 0.0));
    }
    let scale = m.trace() / n as f64;
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::numerical(format!(
            "cholesky failed: non-positive or non-finite trace ({} over n={n})",
            m.trace()
        )));
    }
    let mut jitter = JITTER_START * scale;
    let max_jitter = JITTER_MAX * scale;
    while jitter <= max_jitter {
        let mut trial = m.clone();
        for i in 0..n {
            trial[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(trial) {
            return Ok((chol, jitter));
        }
        jitter *= 2.0;
    }
    Err(Error::numerical(format!(
        "cholesky failed after jitter escalation to {max_jitter:.3e} (n={n}, trace={:.6e})",
        m.trace()
    )))
}

/// Remove round-off asymmetry in place: `m <- (m + m^T) / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}
