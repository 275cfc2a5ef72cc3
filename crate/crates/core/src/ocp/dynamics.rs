//! Continuous-time dynamics and their Euler discretization.

use crate::numerics::{DenseMatrix, DenseVector};
use crate::qp::QpError;
use thiserror::Error;

/// Smoothing offset inside square roots: ∂√x/∂x is unbounded at 0 and the
/// tank model starts at x = 0.
pub const EPS_SQ: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum OcpError {
    #[error("state {coord} is {value:.3e}, below the -eps_sq domain")]
    NegativeState { coord: usize, value: f64 },
    #[error("degenerate active set in the final subproblem: {0}")]
    DegenerateActiveSet(String),
    #[error(transparent)]
    Qp(#[from] QpError),
}

/// State derivative f(x, u, y) with analytic first-order jacobians.
pub trait Dynamics: Send + Sync {
    fn dim_x(&self) -> usize;
    fn dim_u(&self) -> usize;
    fn dim_y(&self) -> usize;
    /// Domain-extended derivative: defined for all x (solver iterates may
    /// transiently leave the physical domain).
    fn deriv(&self, x: &DenseVector, u: &DenseVector, y: &DenseVector) -> DenseVector;
    /// (∂f/∂x, ∂f/∂u, ∂f/∂y) at (x, u, y).
    fn jac(
        &self,
        x: &DenseVector,
        u: &DenseVector,
        y: &DenseVector,
    ) -> (DenseMatrix, DenseMatrix, DenseMatrix);
}

/// Two connected tanks filled by a pump (u₁) through a two-way valve (u₂),
/// with inlet/outlet coefficients y = (y₁, y₂) as design variables:
///
/// ```text
///   ẋ₁ = y₁(1 − u₂)u₁ − y₂√x₁
///   ẋ₂ = y₁u₂u₁ + y₂√x₁ − y₂√x₂
/// ```
///
/// Square roots are smoothed to √(x + eps_sq) and extended by zero below
/// the domain boundary so rollouts of trial steps stay finite.
#[derive(Debug, Clone, Copy, Default)]
pub struct TwoTankDynamics;

// The −√eps_sq offset keeps the empty tank an exact equilibrium: an
// unforced tank must stay at zero, not drain into negative levels.
#[inline]
fn smooth_sqrt(x: f64) -> f64 {
    (x + EPS_SQ).max(0.0).sqrt() - EPS_SQ.sqrt()
}

#[inline]
fn smooth_sqrt_deriv(x: f64) -> f64 {
    let v = x + EPS_SQ;
    if v > 0.0 {
        0.5 / v.sqrt()
    } else {
        0.0
    }
}

impl Dynamics for TwoTankDynamics {
    fn dim_x(&self) -> usize {
        2
    }
    fn dim_u(&self) -> usize {
        2
    }
    fn dim_y(&self) -> usize {
        2
    }

    fn deriv(&self, x: &DenseVector, u: &DenseVector, y: &DenseVector) -> DenseVector {
        let (s1, s2) = (smooth_sqrt(x[0]), smooth_sqrt(x[1]));
        DenseVector::from_vec(vec![
            y[0] * (1.0 - u[1]) * u[0] - y[1] * s1,
            y[0] * u[1] * u[0] + y[1] * s1 - y[1] * s2,
        ])
    }

    fn jac(
        &self,
        x: &DenseVector,
        u: &DenseVector,
        y: &DenseVector,
    ) -> (DenseMatrix, DenseMatrix, DenseMatrix) {
        let (s1, s2) = (smooth_sqrt(x[0]), smooth_sqrt(x[1]));
        let (d1, d2) = (smooth_sqrt_deriv(x[0]), smooth_sqrt_deriv(x[1]));
        let dfdx = DenseMatrix::from_rows(&[
            vec![-y[1] * d1, 0.0],
            vec![y[1] * d1, -y[1] * d2],
        ]);
        let dfdu = DenseMatrix::from_rows(&[
            vec![y[0] * (1.0 - u[1]), -y[0] * u[0]],
            vec![y[0] * u[1], y[0] * u[0]],
        ]);
        let dfdy = DenseMatrix::from_rows(&[
            vec![(1.0 - u[1]) * u[0], -s1],
            vec![u[1] * u[0], s1 - s2],
        ]);
        (dfdx, dfdu, dfdy)
    }
}

/// One explicit Euler step of the two-tank dynamics: x + dt·f(x, u, y).
///
/// Errors with [`OcpError::NegativeState`] when any state lies below the
/// −eps_sq domain of the smoothed square root.
pub fn euler_step(
    x: &DenseVector,
    u: &DenseVector,
    y: &DenseVector,
    dt: f64,
) -> Result<DenseVector, OcpError> {
    for i in 0..x.len() {
        if x[i] < -EPS_SQ {
            return Err(OcpError::NegativeState { coord: i, value: x[i] });
        }
    }
    let f = TwoTankDynamics.deriv(x, u, y);
    let mut out = x.clone();
    out.axpy(dt, &f);
    Ok(out)
}
