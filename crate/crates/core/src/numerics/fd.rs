//! Central finite differences, used as the independent gradient oracle
//! throughout the test suites.

use super::DenseVector;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FdError {
    #[error("function evaluated to a non-finite value at coordinate {coord}")]
    NonFiniteEvaluation { coord: usize },
}

/// Entrywise central-difference gradient (f(x+heᵢ) − f(x−heᵢ)) / (2h).
pub fn finite_diff_grad<F>(f: F, x: &DenseVector, h: f64) -> Result<DenseVector, FdError>
where
    F: Fn(&DenseVector) -> f64,
{
    assert!(h > 0.0, "step must be positive");
    let n = x.len();
    let mut grad = DenseVector::zeros(n);
    let mut xp = x.clone();
    for i in 0..n {
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = f(&xp);
        xp[i] = orig - h;
        let fm = f(&xp);
        xp[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(FdError::NonFiniteEvaluation { coord: i });
        }
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}
