//! Euclidean projections onto the upper-level feasible set: closed-form for
//! boxes, QP-backed for general polyhedra.

use super::solver::{polish_qp, solve_qp, QpError, QpProblem};
use super::{DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::numerics::{DenseMatrix, DenseVector};
use serde::{Deserialize, Serialize};

/// Axis-aligned box; entries may be ±∞.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoxSet {
    pub lo: DenseVector,
    pub hi: DenseVector,
}

impl BoxSet {
    pub fn new(lo: DenseVector, hi: DenseVector) -> Self {
        assert_eq!(lo.len(), hi.len());
        assert!(lo.iter().zip(hi.iter()).all(|(l, h)| l <= h), "box must satisfy lo <= hi");
        Self { lo, hi }
    }

    /// [lo, hi] replicated `times` over consecutive coordinate blocks.
    pub fn uniform(dim: usize, lo: f64, hi: f64) -> Self {
        Self::new(DenseVector::filled(dim, lo), DenseVector::filled(dim, hi))
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, y: &DenseVector, tol: f64) -> bool {
        y.iter()
            .enumerate()
            .all(|(i, v)| *v >= self.lo[i] - tol && *v <= self.hi[i] + tol)
    }

    /// Largest violation of the bounds (0 inside).
    pub fn distance_inf(&self, y: &DenseVector) -> f64 {
        y.iter()
            .enumerate()
            .fold(0.0_f64, |m, (i, v)| m.max(self.lo[i] - v).max(v - self.hi[i]))
    }
}

/// Entrywise clamp min(max(y, lo), hi).
///
/// The subgradient used in backprop is 1 strictly inside and on the
/// boundary, 0 strictly outside.
pub fn project_box(y: &DenseVector, set: &BoxSet) -> DenseVector {
    debug_assert_eq!(y.len(), set.dim());
    DenseVector::from_vec(
        y.iter()
            .enumerate()
            .map(|(i, v)| v.max(set.lo[i]).min(set.hi[i]))
            .collect(),
    )
}

/// argmin over {w : Fw ≤ h} of ‖y − w‖², solved as a QP so it is
/// differentiable through the KKT system.
pub fn project_polyhedron(
    y: &DenseVector,
    f_mat: &DenseMatrix,
    rhs: &DenseVector,
) -> Result<DenseVector, QpError> {
    let qp = projection_qp(y, f_mat, rhs);
    let sol = solve_qp(&qp, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    // Boundary projections are weakly active; polishing restores exactness.
    Ok(polish_qp(&qp, &sol).z)
}

/// The projection QP: H = I, e = −y.
pub fn projection_qp(y: &DenseVector, f_mat: &DenseMatrix, rhs: &DenseVector) -> QpProblem {
    QpProblem::new(
        DenseMatrix::identity(y.len()),
        y.scale(-1.0),
        f_mat.clone(),
        rhs.clone(),
    )
}
