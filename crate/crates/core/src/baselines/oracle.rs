//! Certified reference solutions for small bilevel QPs by active-set
//! enumeration: for every subset S of lower inequality rows, impose the
//! lower KKT conditions with S active, eliminate (z, λ_S) through the
//! resulting linear system, and minimize the upper objective over the
//! remaining polyhedral piece as a strictly convex QP in y. The best
//! feasible piece is the global optimum for convex-lower problems.

use crate::numerics::{DenseMatrix, DenseVector, LuFactors};
use crate::qp::{polish_qp, solve_qp, QpProblem, QpStatus};
use crate::zoo::{BqpFamily, BqpInstance};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("no active-set piece is feasible")]
    Infeasible,
    #[error("enumeration bound exceeded: {rows} lower rows (limit {limit})")]
    TooLarge { rows: usize, limit: usize },
}

/// A bilevel QP in the oracle's normal form. The lower linear cost may
/// depend affinely on y (more general than the generated families, which
/// keep it constant).
#[derive(Debug, Clone)]
pub struct OracleProblem {
    pub upper_hess: Option<DenseMatrix>,
    pub upper_lin_y: DenseVector,
    pub upper_lin_z: DenseVector,
    pub upper_offset: f64,
    pub lower_hess: DenseMatrix,
    pub lower_lin: DenseVector,
    pub lower_lin_y: Option<DenseMatrix>,
    /// Lower rows F z ≤ h + G y.
    pub lower_ineq_z: DenseMatrix,
    pub lower_ineq_y: DenseMatrix,
    pub lower_rhs: DenseVector,
    /// Coupling rows A y ≤ b + E z.
    pub coupling_y: DenseMatrix,
    pub coupling_z: DenseMatrix,
    pub coupling_rhs: DenseVector,
}

impl OracleProblem {
    pub fn from_bqp(family: &BqpFamily, instance: &BqpInstance) -> Self {
        Self {
            upper_hess: Some(family.upper_hess.clone()),
            upper_lin_y: instance.c.clone(),
            upper_lin_z: instance.d.clone(),
            upper_offset: family.upper_offset,
            lower_hess: family.lower_hess.clone(),
            lower_lin: family.lower_lin.clone(),
            lower_lin_y: None,
            lower_ineq_z: family.lower_ineq_z.clone(),
            lower_ineq_y: family.lower_ineq_y.clone(),
            lower_rhs: family.lower_rhs.clone(),
            coupling_y: family.upper_ineq_y.clone(),
            coupling_z: family.upper_ineq_z.clone(),
            coupling_rhs: family.upper_rhs.clone(),
        }
    }

    pub fn dim_y(&self) -> usize {
        self.upper_lin_y.len()
    }

    pub fn dim_z(&self) -> usize {
        self.lower_lin.len()
    }

    pub fn upper_objective(&self, y: &DenseVector, z: &DenseVector) -> f64 {
        let quad = match &self.upper_hess {
            Some(q) => 0.5 * y.dot(&q.matvec(y)),
            None => 0.0,
        };
        quad + self.upper_lin_y.dot(y) + self.upper_lin_z.dot(z) + self.upper_offset
    }
}

/// Optimality certificate attached to the oracle solution.
#[derive(Debug, Clone)]
pub struct OracleCertificate {
    /// KKT residual of the lower level re-solved at y*.
    pub lower_kkt_residual: f64,
    /// min over coupling rows of (b + Ez − Ay); nonnegative means feasible.
    pub upper_feasibility_margin: f64,
    pub pieces_enumerated: usize,
    pub pieces_skipped: usize,
}

#[derive(Debug, Clone)]
pub struct OracleResult {
    pub y_star: DenseVector,
    pub z_star: DenseVector,
    pub lambda_star: DenseVector,
    pub objective: f64,
    pub active_set: Vec<usize>,
    pub certificate: OracleCertificate,
}

pub const ENUMERATION_LIMIT: usize = 12;

struct PieceOutcome {
    objective: f64,
    y: DenseVector,
    z: DenseVector,
    lambda: DenseVector,
    active: Vec<usize>,
}

/// Solve one piece: lower KKT with rows `active` forced active.
fn solve_piece(problem: &OracleProblem, active: &[usize]) -> Option<PieceOutcome> {
    let n = problem.dim_z();
    let m = problem.dim_y();
    let na = active.len();
    if na > n {
        return None;
    }
    let r_lo = problem.lower_rhs.len();
    let dim = n + na;
    // [H F_Sᵀ; F_S 0] (z, λ_S) = [−e − E_y y; h_S + G_S y]
    let mut k = DenseMatrix::zeros(dim, dim);
    for r in 0..n {
        for c in 0..n {
            k.set(r, c, problem.lower_hess.get(r, c));
        }
    }
    for (ai, &ri) in active.iter().enumerate() {
        for c in 0..n {
            k.set(n + ai, c, problem.lower_ineq_z.get(ri, c));
            k.set(c, n + ai, problem.lower_ineq_z.get(ri, c));
        }
    }
    // Rank-deficient equality systems are pruned (measure-zero under the
    // uniform generator).
    let lu = LuFactors::factor(&k).ok()?;

    // Affine maps (z, λ)(y) = base + wing·y.
    let mut rhs0 = vec![0.0; dim];
    for i in 0..n {
        rhs0[i] = -problem.lower_lin[i];
    }
    for (ai, &ri) in active.iter().enumerate() {
        rhs0[n + ai] = problem.lower_rhs[ri];
    }
    let base = lu.solve(&DenseVector::from_vec(rhs0));
    let mut wing = DenseMatrix::zeros(dim, m);
    for col in 0..m {
        let mut rhs = vec![0.0; dim];
        if let Some(ey) = &problem.lower_lin_y {
            for i in 0..n {
                rhs[i] = -ey.get(i, col);
            }
        }
        for (ai, &ri) in active.iter().enumerate() {
            rhs[n + ai] = problem.lower_ineq_y.get(ri, col);
        }
        let sol = lu.solve(&DenseVector::from_vec(rhs));
        for r in 0..dim {
            wing.set(r, col, sol[r]);
        }
    }
    let z0 = DenseVector::from_vec(base.as_slice()[..n].to_vec());
    let zy = DenseMatrix::from_vec(
        n,
        m,
        (0..n).flat_map(|r| (0..m).map(move |c| (r, c))).map(|(r, c)| wing.get(r, c)).collect(),
    );
    let l0 = DenseVector::from_vec(base.as_slice()[n..].to_vec());
    let ly = DenseMatrix::from_vec(
        na,
        m,
        (n..dim).flat_map(|r| (0..m).map(move |c| (r, c))).map(|(r, c)| wing.get(r, c)).collect(),
    );

    // Piece QP over y: objective ½yᵀQy + (c + Zyᵀd)ᵀ y + const.
    let hess = match &problem.upper_hess {
        Some(q) => q.clone(),
        None => DenseMatrix::zeros(m, m),
    };
    let mut lin = problem.upper_lin_y.clone();
    lin.axpy(1.0, &zy.matvec_transpose(&problem.upper_lin_z));

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut rhs: Vec<f64> = Vec::new();
    // λ_S(y) ≥ 0  ⇔  −L_y y ≤ L0
    for ai in 0..na {
        rows.push((0..m).map(|c| -ly.get(ai, c)).collect());
        rhs.push(l0[ai]);
    }
    // Inactive rows keep slack: F_i z(y) − G_i y ≤ h_i
    for ri in 0..r_lo {
        if !active.contains(&ri) {
            let fi: Vec<f64> = (0..n).map(|c| problem.lower_ineq_z.get(ri, c)).collect();
            let row: Vec<f64> = (0..m)
                .map(|c| {
                    let mut v = -problem.lower_ineq_y.get(ri, c);
                    for (zr, f) in fi.iter().enumerate() {
                        v += f * zy.get(zr, c);
                    }
                    v
                })
                .collect();
            let mut b = problem.lower_rhs[ri];
            for (zr, f) in fi.iter().enumerate() {
                b -= f * z0[zr];
            }
            rows.push(row);
            rhs.push(b);
        }
    }
    // Coupling: (A − E Z_y) y ≤ b + E z0
    let r_up = problem.coupling_rhs.len();
    for ri in 0..r_up {
        let ei: Vec<f64> = (0..n).map(|c| problem.coupling_z.get(ri, c)).collect();
        let row: Vec<f64> = (0..m)
            .map(|c| {
                let mut v = problem.coupling_y.get(ri, c);
                for (zr, e) in ei.iter().enumerate() {
                    v -= e * zy.get(zr, c);
                }
                v
            })
            .collect();
        let mut b = problem.coupling_rhs[ri];
        for (zr, e) in ei.iter().enumerate() {
            b += e * z0[zr];
        }
        rows.push(row);
        rhs.push(b);
    }
    let piece_qp = QpProblem::new(
        hess,
        lin,
        DenseMatrix::from_rows(&rows),
        DenseVector::from_vec(rhs),
    );
    let sol = solve_qp(&piece_qp, 1e-10, 200).ok()?;
    if sol.status != QpStatus::Optimal {
        return None;
    }
    let sol = polish_qp(&piece_qp, &sol);
    let y = sol.z;
    let mut z = z0.clone();
    z.axpy(1.0, &zy.matvec(&y));
    let mut lambda_active = l0.clone();
    lambda_active.axpy(1.0, &ly.matvec(&y));
    let mut lambda = DenseVector::zeros(r_lo);
    for (ai, &ri) in active.iter().enumerate() {
        lambda[ri] = lambda_active[ai].max(0.0);
    }
    let objective = problem.upper_objective(&y, &z);
    Some(PieceOutcome { objective, y, z, lambda, active: active.to_vec() })
}

/// Global optimum of a convex-lower bilevel QP by full enumeration of the
/// lower active set. Ties between pieces go to the lowest piece index.
pub fn solve_oracle(problem: &OracleProblem) -> Result<OracleResult, OracleError> {
    let r_lo = problem.lower_rhs.len();
    if r_lo > ENUMERATION_LIMIT {
        return Err(OracleError::TooLarge { rows: r_lo, limit: ENUMERATION_LIMIT });
    }
    let n_pieces = 1usize << r_lo;
    let outcomes: Vec<Option<PieceOutcome>> = (0..n_pieces)
        .into_par_iter()
        .map(|mask| {
            let active: Vec<usize> = (0..r_lo).filter(|i| mask & (1 << i) != 0).collect();
            solve_piece(problem, &active)
        })
        .collect();

    let mut skipped = 0;
    let mut best: Option<PieceOutcome> = None;
    for outcome in outcomes {
        match outcome {
            Some(o) => {
                if best.as_ref().is_none_or(|b| o.objective < b.objective) {
                    best = Some(o);
                }
            }
            None => skipped += 1,
        }
    }
    let best = best.ok_or(OracleError::Infeasible)?;

    // Certificate: resolve the lower level at y* and measure coupling slack.
    let mut lower_lin = problem.lower_lin.clone();
    if let Some(ey) = &problem.lower_lin_y {
        lower_lin.axpy(1.0, &ey.matvec(&best.y));
    }
    let mut lower_rhs = problem.lower_rhs.clone();
    lower_rhs.axpy(1.0, &problem.lower_ineq_y.matvec(&best.y));
    let lower_qp = QpProblem::new(
        problem.lower_hess.clone(),
        lower_lin,
        problem.lower_ineq_z.clone(),
        lower_rhs,
    );
    let lower_kkt = crate::qp::kkt_residual(
        &lower_qp,
        &best.z,
        &best.lambda,
        &DenseVector::zeros(0),
    );
    let coupling_slack = {
        let mut s = problem.coupling_rhs.clone();
        s.axpy(1.0, &problem.coupling_z.matvec(&best.z));
        s.axpy(-1.0, &problem.coupling_y.matvec(&best.y));
        (0..s.len()).fold(f64::INFINITY, |m, i| m.min(s[i]))
    };
    Ok(OracleResult {
        objective: best.objective,
        y_star: best.y,
        z_star: best.z,
        lambda_star: best.lambda,
        active_set: best.active,
        certificate: OracleCertificate {
            lower_kkt_residual: lower_kkt,
            upper_feasibility_margin: coupling_slack,
            pieces_enumerated: n_pieces,
            pieces_skipped: skipped,
        },
    })
}

/// Convenience wrapper for generated family instances.
pub fn solve_bqp_exact(
    family: &BqpFamily,
    instance: &BqpInstance,
) -> Result<OracleResult, OracleError> {
    solve_oracle(&OracleProblem::from_bqp(family, instance))
}
