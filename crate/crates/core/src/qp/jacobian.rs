//! Implicit differentiation of a solved QP through its KKT system,
//! restricted to the active set.
//!
//! At a solution with strict complementarity, the active constraints stay
//! active under small parameter perturbations, so differentiating
//!
//! ```text
//!   H z + e + F_Aᵀ λ_A + A_eqᵀ μ = 0
//!   F_A z = h_A
//!   A_eq z = b_eq
//! ```
//!
//! gives one linear KKT solve per parameter direction. The factorization is
//! shared across directions. Besides the named blocks (∂z*/∂e, ∂z*/∂h,
//! ∂z*/∂b_eq) an arbitrary structured perturbation (dH, de, dF, dh, dA, db)
//! is supported, which is what problem assemblies with design variables in
//! the constraint matrix need.

use super::solver::{QpError, QpProblem, QpSolution};
use crate::numerics::{CholeskyFactors, DenseMatrix, DenseVector, LuFactors};

/// Parameter blocks with closed-form right-hand sides.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamBlock {
    /// Linear cost e.
    LinCost,
    /// Inequality right-hand side h.
    IneqRhs,
    /// Equality right-hand side b_eq.
    EqRhs,
}

/// Sensitivities ∂z*/∂θ for each requested block: (dim z) × (dim θ).
#[derive(Debug, Clone, Default)]
pub struct QpJacobian {
    pub dz_dlin: Option<DenseMatrix>,
    pub dz_dineq_rhs: Option<DenseMatrix>,
    pub dz_deq_rhs: Option<DenseMatrix>,
    /// Rows at an active-set kink that were treated as inactive.
    pub weakly_active: Vec<usize>,
}

/// A structured perturbation direction of the QP data.
#[derive(Default, Clone)]
pub struct QpDirection<'a> {
    pub d_hess: Option<&'a DenseMatrix>,
    pub d_lin: Option<&'a DenseVector>,
    pub d_ineq_mat: Option<&'a DenseMatrix>,
    pub d_ineq_rhs: Option<&'a DenseVector>,
    pub d_eq_mat: Option<&'a DenseMatrix>,
    pub d_eq_rhs: Option<&'a DenseVector>,
}

struct ActiveSet {
    rows: Vec<usize>,
    /// Rows near an active-set kink (multiplier and slack of comparable,
    /// small magnitude — at an interior-point solution both sit near √μ).
    /// They are treated as inactive, which yields the generic one-sided
    /// derivative: exact whenever the multiplier is identically zero on a
    /// neighborhood, e.g. slack variables at rest.
    weakly_active: Vec<usize>,
}

/// A row is active when its multiplier clearly dominates its slack. At a
/// converged interior-point solution, strongly active rows have λ = O(1),
/// s = O(μ); strongly inactive rows the reverse; weakly active rows have
/// λ ≈ s ≈ √μ, which no absolute threshold separates reliably.
const DOMINANCE_RATIO: f64 = 100.0;

fn identify_active_set(qp: &QpProblem, sol: &QpSolution, act_tol: f64) -> ActiveSet {
    let fz = qp.ineq_mat.matvec(&sol.z);
    let mut rows = Vec::new();
    let mut weakly_active = Vec::new();
    for i in 0..qp.n_ineq() {
        let slack = (qp.ineq_rhs[i] - fz[i]).max(0.0);
        let lam = sol.lambda[i];
        if lam >= act_tol && lam >= DOMINANCE_RATIO * slack {
            rows.push(i);
        } else if lam >= act_tol || (slack <= act_tol && lam > slack / DOMINANCE_RATIO) {
            weakly_active.push(i);
        }
    }
    ActiveSet { rows, weakly_active }
}

/// Shared factorization of the active-set KKT matrix.
enum KktFactor {
    Lu { lu: LuFactors },
    /// H diagonal and positive: eliminate dz and factor F_A H⁻¹ F_Aᵀ.
    DiagSchur { h_diag: Vec<f64>, chol: Option<CholeskyFactors> },
}

struct KktSystem<'a> {
    qp: &'a QpProblem,
    active: Vec<usize>,
    factor: KktFactor,
}

impl<'a> KktSystem<'a> {
    fn build(qp: &'a QpProblem, active: Vec<usize>) -> Result<Self, QpError> {
        let n = qp.dim();
        let na = active.len();
        let me = qp.n_eq();

        let h_is_diag_pd = me == 0
            && (0..n).all(|i| qp.hess.get(i, i) > 0.0)
            && (0..n).all(|r| (0..n).all(|c| r == c || qp.hess.get(r, c) == 0.0));
        if h_is_diag_pd {
            let h_diag: Vec<f64> = (0..n).map(|i| qp.hess.get(i, i)).collect();
            let chol = if na > 0 {
                let mut g = DenseMatrix::zeros(na, na);
                for (ai, &ri) in active.iter().enumerate() {
                    for (aj, &rj) in active.iter().enumerate() {
                        let mut v = 0.0;
                        for c in 0..n {
                            v += qp.ineq_mat.get(ri, c) * qp.ineq_mat.get(rj, c) / h_diag[c];
                        }
                        g.set(ai, aj, v);
                    }
                }
                Some(CholeskyFactors::factor(&g).map_err(|_| {
                    QpError::DegenerateActiveSet("active rows are linearly dependent".into())
                })?)
            } else {
                None
            };
            return Ok(Self { qp, active, factor: KktFactor::DiagSchur { h_diag, chol } });
        }

        let dim = n + na + me;
        let mut k = DenseMatrix::zeros(dim, dim);
        for r in 0..n {
            for c in 0..n {
                k.set(r, c, qp.hess.get(r, c));
            }
        }
        for (ai, &ri) in active.iter().enumerate() {
            for c in 0..n {
                k.set(n + ai, c, qp.ineq_mat.get(ri, c));
                k.set(c, n + ai, qp.ineq_mat.get(ri, c));
            }
        }
        if let Some(a) = &qp.eq_mat {
            for r in 0..me {
                for c in 0..n {
                    k.set(n + na + r, c, a.get(r, c));
                    k.set(c, n + na + r, a.get(r, c));
                }
            }
        }
        let lu = LuFactors::factor(&k).map_err(|_| {
            QpError::DegenerateActiveSet("active-set KKT matrix is singular".into())
        })?;
        Ok(Self { qp, active, factor: KktFactor::Lu { lu } })
    }

    /// Solve for dz given the stationarity residual `top` (length n), the
    /// active-row residual `act` (length |A|) and equality residual `eq`.
    fn solve(&self, top: &DenseVector, act: &DenseVector, eq: &DenseVector) -> DenseVector {
        let n = self.qp.dim();
        let na = self.active.len();
        match &self.factor {
            KktFactor::Lu { lu } => {
                let me = eq.len();
                let mut rhs = vec![0.0; n + na + me];
                rhs[..n].copy_from_slice(top.as_slice());
                rhs[n..n + na].copy_from_slice(act.as_slice());
                rhs[n + na..].copy_from_slice(eq.as_slice());
                let sol = lu.solve(&DenseVector::from_vec(rhs));
                DenseVector::from_vec(sol.as_slice()[..n].to_vec())
            }
            KktFactor::DiagSchur { h_diag, chol } => {
                // H dz + F_Aᵀ dλ = top;  F_A dz = act.
                let hinv_top =
                    DenseVector::from_vec(top.iter().zip(h_diag).map(|(t, h)| t / h).collect());
                if let Some(chol) = chol {
                    let mut rhs = DenseVector::zeros(na);
                    for (ai, &ri) in self.active.iter().enumerate() {
                        let mut v = -act[ai];
                        for c in 0..n {
                            v += self.qp.ineq_mat.get(ri, c) * hinv_top[c];
                        }
                        rhs[ai] = v;
                    }
                    let dlam = chol.solve(&rhs);
                    let mut dz = hinv_top;
                    for (ai, &ri) in self.active.iter().enumerate() {
                        let l = dlam[ai];
                        if l != 0.0 {
                            for c in 0..n {
                                dz[c] -= self.qp.ineq_mat.get(ri, c) * l / h_diag[c];
                            }
                        }
                    }
                    dz
                } else {
                    hinv_top
                }
            }
        }
    }
}

/// Jacobians of the QP solution for the named parameter blocks.
///
/// Requires `sol` optimal with strict complementarity at `act_tol`.
pub fn qp_jacobian(
    qp: &QpProblem,
    sol: &QpSolution,
    blocks: &[ParamBlock],
    act_tol: f64,
) -> Result<QpJacobian, QpError> {
    let active = identify_active_set(qp, sol, act_tol);
    let weakly_active = active.weakly_active;
    let sys = KktSystem::build(qp, active.rows)?;
    let n = qp.dim();
    let na = sys.active.len();
    let me = qp.n_eq();
    let mut out = QpJacobian { weakly_active, ..QpJacobian::default() };

    for block in blocks {
        match block {
            ParamBlock::LinCost => {
                let mut jac = DenseMatrix::zeros(n, n);
                for j in 0..n {
                    let mut top = DenseVector::zeros(n);
                    top[j] = -1.0;
                    let dz =
                        sys.solve(&top, &DenseVector::zeros(na), &DenseVector::zeros(me));
                    for r in 0..n {
                        jac.set(r, j, dz[r]);
                    }
                }
                out.dz_dlin = Some(jac);
            }
            ParamBlock::IneqRhs => {
                let mi = qp.n_ineq();
                let mut jac = DenseMatrix::zeros(n, mi);
                for (ai, &row) in sys.active.iter().enumerate() {
                    let mut act = DenseVector::zeros(na);
                    act[ai] = 1.0;
                    let dz =
                        sys.solve(&DenseVector::zeros(n), &act, &DenseVector::zeros(me));
                    for r in 0..n {
                        jac.set(r, row, dz[r]);
                    }
                }
                out.dz_dineq_rhs = Some(jac);
            }
            ParamBlock::EqRhs => {
                let mut jac = DenseMatrix::zeros(n, me);
                for j in 0..me {
                    let mut eq = DenseVector::zeros(me);
                    eq[j] = 1.0;
                    let dz = sys.solve(&DenseVector::zeros(n), &DenseVector::zeros(na), &eq);
                    for r in 0..n {
                        jac.set(r, j, dz[r]);
                    }
                }
                out.dz_deq_rhs = Some(jac);
            }
        }
    }
    Ok(out)
}

/// Directional derivatives dz* for arbitrary structured perturbations of the
/// QP data, one column per direction.
pub fn qp_directional_jacobian(
    qp: &QpProblem,
    sol: &QpSolution,
    dirs: &[QpDirection<'_>],
    act_tol: f64,
) -> Result<DenseMatrix, QpError> {
    let active = identify_active_set(qp, sol, act_tol);
    let sys = KktSystem::build(qp, active.rows)?;
    let n = qp.dim();
    let na = sys.active.len();
    let me = qp.n_eq();
    let mut jac = DenseMatrix::zeros(n, dirs.len());

    for (col, dir) in dirs.iter().enumerate() {
        // Stationarity: H dz + F_Aᵀ dλ + Aᵀ dμ = −(dH z + de + dF_Aᵀ λ_A + dAᵀ μ)
        let mut top = DenseVector::zeros(n);
        if let Some(dh) = dir.d_hess {
            top.axpy(-1.0, &dh.matvec(&sol.z));
        }
        if let Some(de) = dir.d_lin {
            top.axpy(-1.0, de);
        }
        if let Some(df) = dir.d_ineq_mat {
            // Only active rows carry multipliers.
            for &row in &sys.active {
                let l = sol.lambda[row];
                if l != 0.0 {
                    for c in 0..n {
                        top[c] -= df.get(row, c) * l;
                    }
                }
            }
        }
        if let Some(da) = dir.d_eq_mat {
            top.axpy(-1.0, &da.matvec_transpose(&sol.mu));
        }
        // Active rows: F_A dz = dh_A − dF_A z
        let mut act = DenseVector::zeros(na);
        for (ai, &row) in sys.active.iter().enumerate() {
            let mut v = 0.0;
            if let Some(dh) = dir.d_ineq_rhs {
                v += dh[row];
            }
            if let Some(df) = dir.d_ineq_mat {
                for c in 0..n {
                    v -= df.get(row, c) * sol.z[c];
                }
            }
            act[ai] = v;
        }
        // Equalities: A dz = db − dA z
        let mut eq = DenseVector::zeros(me);
        for r in 0..me {
            let mut v = 0.0;
            if let Some(db) = dir.d_eq_rhs {
                v += db[r];
            }
            if let Some(da) = dir.d_eq_mat {
                for c in 0..n {
                    v -= da.get(r, c) * sol.z[c];
                }
            }
            eq[r] = v;
        }
        let dz = sys.solve(&top, &act, &eq);
        for r in 0..n {
            jac.set(r, col, dz[r]);
        }
    }
    Ok(jac)
}
