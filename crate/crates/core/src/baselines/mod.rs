//! Reference methods the learned models are measured against: an exact
//! active-set enumeration oracle for small bilevel QPs and a penalized
//! particle-swarm baseline.

mod oracle;
mod pso;

pub use oracle::{
    solve_bqp_exact, solve_oracle, OracleCertificate, OracleError, OracleProblem, OracleResult,
    ENUMERATION_LIMIT,
};
pub use pso::{pso_solve, PsoResult, PsoSettings};

use thiserror::Error;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("reference objective is zero; the relative gap is undefined")]
pub struct ZeroReference;

/// Relative optimality gap |L̂ − L*| / |L*|.
pub fn relative_gap(l_hat: f64, l_star: f64) -> Result<f64, ZeroReference> {
    if l_star == 0.0 {
        return Err(ZeroReference);
    }
    Ok((l_hat - l_star).abs() / l_star.abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gap_formula() {
        assert!((relative_gap(1.01, 1.00).unwrap() - 0.01).abs() < 1e-12);
        assert_eq!(relative_gap(2.5, 2.5).unwrap(), 0.0);
        assert_eq!(relative_gap(1.0, 0.0), Err(ZeroReference));
        // Sign-independence of the reference.
        assert!((relative_gap(-0.9, -1.0).unwrap() - 0.1).abs() < 1e-12);
    }
}
