//! Sensitivities ∂(x, u)/∂y of a converged optimal-control solution by
//! implicit differentiation of the final SQP subproblem's KKT system.
//!
//! The design variable enters through the linearized dynamics, so the
//! right-hand sides are assembled from rollouts at perturbed y. The KKT
//! matrix itself uses the exact Lagrangian curvature (recovered by central
//! differences of the Lagrangian gradient at the converged point): the
//! Gauss-Newton curvature of the subproblem drops terms proportional to the
//! terminal residual, which is not negligible at finite penalty weight.

use super::dynamics::OcpError;
use super::sqp::{objective_gradient, rollout_with_sens, OcpProblem, OcpSolution};
use crate::numerics::{DenseMatrix, DenseVector, LuFactors};

/// λ ≥ act_tol and λ ≥ ratio·slack, as in the QP layer.
const DOMINANCE_RATIO: f64 = 100.0;

/// Gradient of the Lagrangian in the stacked controls, with frozen
/// state-row multipliers.
fn lagrangian_grad(
    ocp: &OcpProblem,
    u_flat: &DenseVector,
    y: &DenseVector,
    state_duals: &[(usize, f64, f64)], // (state index, sign, λ)
) -> DenseVector {
    let roll = rollout_with_sens(ocp, u_flat, y);
    let mut g = objective_gradient(ocp, u_flat, &roll);
    for &(idx, sign, lam) in state_duals {
        if lam != 0.0 {
            for c in 0..g.len() {
                g[c] += lam * sign * roll.s_mat.get(idx, c);
            }
        }
    }
    g
}

/// Full trajectory sensitivities [∂x/∂y; ∂u/∂y], one column per design
/// coordinate. Requires a converged solution whose final subproblem has a
/// nondegenerate active set.
pub fn ocp_jacobian(
    ocp: &OcpProblem,
    y: &DenseVector,
    sol: &OcpSolution,
    act_tol: f64,
) -> Result<DenseMatrix, OcpError> {
    let fin = &sol.final_subproblem;
    let nu = ocp.n_controls();
    let n_states = ocp.n_states();
    let dy = ocp.dynamics.dim_y();
    let u_flat = sol.u_flat();

    // Classify active rows of the final subproblem. Control rows have
    // constant gradients ±e_j; state rows carry rollout sensitivities.
    let fz = fin.qp.ineq_mat.matvec(&fin.qp_sol.z);
    let mut active_ctrl: Vec<(usize, f64)> = Vec::new(); // (control index, sign)
    let mut active_state: Vec<(usize, f64, f64)> = Vec::new(); // (state idx, sign, λ)
    let mut state_duals: Vec<(usize, f64, f64)> = Vec::new();
    for i in 0..fin.qp.n_ineq() {
        let lam = fin.qp_sol.lambda[i];
        let slack = (fin.qp.ineq_rhs[i] - fz[i]).max(0.0);
        let strongly_active = lam >= act_tol && lam >= DOMINANCE_RATIO * slack;
        if i < 2 * fin.row_map.n_u {
            if strongly_active {
                let j = i / 2;
                let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                active_ctrl.push((j, sign));
            }
        } else {
            let (idx, sign) = fin.row_map.state_rows[i - 2 * fin.row_map.n_u];
            if strongly_active {
                active_state.push((idx, sign, lam));
                state_duals.push((idx, sign, lam));
            }
        }
    }

    // Exact Lagrangian curvature by central differences of ∇L columns.
    let mut hess = DenseMatrix::zeros(nu, nu);
    for j in 0..nu {
        let h = 1e-6 * (1.0 + u_flat[j].abs());
        let mut up = u_flat.clone();
        up[j] += h;
        let gp = lagrangian_grad(ocp, &up, y, &state_duals);
        let mut um = u_flat.clone();
        um[j] -= h;
        let gm = lagrangian_grad(ocp, &um, y, &state_duals);
        for r in 0..nu {
            hess.set(r, j, (gp[r] - gm[r]) / (2.0 * h));
        }
    }
    // Symmetrize FD noise away.
    let hess = hess.add(&hess.transpose()).scale(0.5);

    // Constraint gradients of the candidate active rows. Control-bound rows
    // first (exact unit gradients), then state rows. Bound-and-state
    // combinations can be linearly dependent (a zeroed inflow pins the next
    // state row to the same direction), so dependent rows are filtered by
    // modified Gram-Schmidt before factoring; their activity is implied by
    // the kept rows to first order.
    enum RowKind {
        Ctrl,
        State(usize, f64), // (state index, sign)
    }
    let mut cand: Vec<(RowKind, DenseVector)> = Vec::new();
    for &(j, sign) in &active_ctrl {
        let mut g = DenseVector::zeros(nu);
        g[j] = sign;
        cand.push((RowKind::Ctrl, g));
    }
    for &(idx, sign, _) in &active_state {
        let mut g = DenseVector::zeros(nu);
        for c in 0..nu {
            g[c] = sign * fin.s_mat.get(idx, c);
        }
        cand.push((RowKind::State(idx, sign), g));
    }
    let mut kept: Vec<(RowKind, DenseVector)> = Vec::new();
    let mut basis: Vec<DenseVector> = Vec::new();
    for (kind, g) in cand {
        let norm = g.norm2();
        if norm <= 1e-12 {
            continue;
        }
        let mut resid = g.clone();
        for b in &basis {
            let c = resid.dot(b);
            resid.axpy(-c, b);
        }
        if resid.norm2() >= 1e-7 * norm {
            basis.push(resid.scale(1.0 / resid.norm2()));
            kept.push((kind, g));
        }
    }

    // KKT matrix over (du, dλ_kept).
    let na = kept.len();
    let dim = nu + na;
    let mut kkt = DenseMatrix::zeros(dim, dim);
    for r in 0..nu {
        for c in 0..nu {
            kkt.set(r, c, hess.get(r, c));
        }
    }
    for (ai, (_, g)) in kept.iter().enumerate() {
        for c in 0..nu {
            kkt.set(nu + ai, c, g[c]);
            kkt.set(c, nu + ai, g[c]);
        }
    }
    let lu = LuFactors::factor(&kkt)
        .map_err(|e| OcpError::DegenerateActiveSet(format!("KKT factorization failed: {e}")))?;

    // Right-hand sides per design coordinate by central differences over y:
    // −∂(∇L)/∂y_m and −∂c_A/∂y_m (state rows via P at perturbed rollouts).
    let mut jac = DenseMatrix::zeros(n_states + nu, dy);
    let roll0 = rollout_with_sens(ocp, &u_flat, y);
    for m in 0..dy {
        let h = 1e-6 * (1.0 + y[m].abs());
        let mut yp = y.clone();
        yp[m] += h;
        let mut ym = y.clone();
        ym[m] -= h;
        let gp = lagrangian_grad(ocp, &u_flat, &yp, &state_duals);
        let gm = lagrangian_grad(ocp, &u_flat, &ym, &state_duals);
        let rp = rollout_with_sens(ocp, &u_flat, &yp);
        let rm = rollout_with_sens(ocp, &u_flat, &ym);

        let mut rhs = vec![0.0; dim];
        for r in 0..nu {
            rhs[r] = -(gp[r] - gm[r]) / (2.0 * h);
        }
        for (ai, (kind, _)) in kept.iter().enumerate() {
            if let RowKind::State(idx, sign) = kind {
                let dc = sign * (rp.x_stack[*idx] - rm.x_stack[*idx]) / (2.0 * h);
                rhs[nu + ai] = -dc;
            }
        }
        let sol_dir = lu.solve(&DenseVector::from_vec(rhs));
        // du/dy_m
        for r in 0..nu {
            jac.set(n_states + r, m, sol_dir[r]);
        }
        // dx/dy_m = S du/dy_m + P_m
        for i in 0..n_states {
            let mut v = roll0.p_mat.get(i, m);
            for c in 0..nu {
                v += fin.s_mat.get(i, c) * sol_dir[c];
            }
            jac.set(i, m, v);
        }
    }
    Ok(jac)
}
