//! Trust-region SQP on the single-shooting control parameterization.
//!
//! States are eliminated by rollout, so each subproblem is a dense QP in the
//! stacked controls only (2N variables at the tank model's N = 20). Every
//! iteration linearizes the rollout, solves a box/state-constrained QP
//! inside an ∞-norm trust region, and accepts steps by an ℓ1-merit ratio
//! test with fixed penalty.

use super::dynamics::Dynamics;
use crate::numerics::{DenseMatrix, DenseVector};
use crate::qp::{solve_qp, BoxSet, QpProblem, QpSolution, QpStatus};
use std::sync::Arc;

#[derive(Clone)]
pub struct OcpProblem {
    pub dynamics: Arc<dyn Dynamics>,
    pub x0: DenseVector,
    /// Number of Euler frames N; dt = T/N.
    pub horizon: usize,
    pub dt: f64,
    /// Per-step control bounds (dimension dim_u).
    pub control_bounds: BoxSet,
    /// Per-step state bounds (dimension dim_x).
    pub state_bounds: BoxSet,
    /// Terminal reference p.
    pub terminal_ref: DenseVector,
    /// Terminal penalty weight ρ.
    pub terminal_weight: f64,
}

impl OcpProblem {
    pub fn n_controls(&self) -> usize {
        self.horizon * self.dynamics.dim_u()
    }

    pub fn n_states(&self) -> usize {
        self.horizon * self.dynamics.dim_x()
    }

    /// Σₖ‖u⁽ᵏ⁾‖² + ρ‖x⁽ᴺ⁾ − p‖²
    pub fn objective(&self, u_flat: &DenseVector, x_flat: &DenseVector) -> f64 {
        let dx = self.dynamics.dim_x();
        let xn = &x_flat.as_slice()[x_flat.len() - dx..];
        let term: f64 = xn
            .iter()
            .zip(self.terminal_ref.iter())
            .map(|(x, p)| (x - p) * (x - p))
            .sum();
        u_flat.dot(u_flat) + self.terminal_weight * term
    }
}

#[derive(Debug, Clone)]
pub struct SqpSettings {
    pub tol: f64,
    pub max_iter: usize,
    pub trust_init: f64,
    pub trust_shrink: f64,
    pub trust_expand: f64,
    pub qp_tol: f64,
    pub qp_max_iter: usize,
}

impl Default for SqpSettings {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 50,
            trust_init: 0.5,
            trust_shrink: 0.5,
            trust_expand: 1.5,
            qp_tol: 1e-8,
            qp_max_iter: 100,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OcpSolution {
    /// States x⁽¹⁾..x⁽ᴺ⁾.
    pub x: Vec<DenseVector>,
    /// Controls u⁽¹⁾..u⁽ᴺ⁾.
    pub u: Vec<DenseVector>,
    pub objective: f64,
    pub sqp_iters: usize,
    pub converged: bool,
    pub kkt_residual: f64,
    /// Merit values at accepted iterates (fixed penalty, so comparable).
    pub merit_trace: Vec<f64>,
    /// Final linearization and subproblem, kept for implicit differentiation.
    pub final_subproblem: FinalSubproblem,
}

impl OcpSolution {
    pub fn u_flat(&self) -> DenseVector {
        flatten(&self.u)
    }

    pub fn x_flat(&self) -> DenseVector {
        flatten(&self.x)
    }

    /// z := (x, u) stacked.
    pub fn z_flat(&self) -> DenseVector {
        let mut v = self.x_flat().into_vec();
        v.extend_from_slice(self.u_flat().as_slice());
        DenseVector::from_vec(v)
    }
}

fn flatten(traj: &[DenseVector]) -> DenseVector {
    let mut v = Vec::new();
    for step in traj {
        v.extend_from_slice(step.as_slice());
    }
    DenseVector::from_vec(v)
}

/// Rollout artifacts the differentiation path reuses.
#[derive(Debug, Clone)]
pub struct FinalSubproblem {
    pub qp: QpProblem,
    pub qp_sol: QpSolution,
    /// ∂x_stack/∂u_flat at the base trajectory.
    pub s_mat: DenseMatrix,
    /// ∂x_stack/∂y at the base trajectory (fixed controls).
    pub p_mat: DenseMatrix,
    pub row_map: RowMap,
}

/// Fixed layout of the subproblem's inequality rows.
#[derive(Debug, Clone)]
pub struct RowMap {
    pub n_u: usize,
    /// (state-stack index, +1 upper / −1 lower) per state row, in order
    /// after the 2·n_u trust-region/box rows.
    pub state_rows: Vec<(usize, f64)>,
}

pub(crate) struct Rollout {
    pub x_stack: DenseVector,
    pub s_mat: DenseMatrix,
    pub p_mat: DenseMatrix,
}

/// Forward rollout with sensitivities ∂x/∂u (S) and ∂x/∂y (P).
pub(crate) fn rollout_with_sens(ocp: &OcpProblem, u_flat: &DenseVector, y: &DenseVector) -> Rollout {
    let dx = ocp.dynamics.dim_x();
    let du = ocp.dynamics.dim_u();
    let dy = ocp.dynamics.dim_y();
    let n = ocp.horizon;
    let nu = n * du;
    let mut x = ocp.x0.clone();
    let mut s_prev = DenseMatrix::zeros(dx, nu);
    let mut p_prev = DenseMatrix::zeros(dx, dy);
    let mut x_stack = Vec::with_capacity(n * dx);
    let mut s_mat = DenseMatrix::zeros(n * dx, nu);
    let mut p_mat = DenseMatrix::zeros(n * dx, dy);
    for k in 0..n {
        let u_k = DenseVector::from_vec(u_flat.as_slice()[k * du..(k + 1) * du].to_vec());
        let f = ocp.dynamics.deriv(&x, &u_k, y);
        let (dfdx, dfdu, dfdy) = ocp.dynamics.jac(&x, &u_k, y);
        // x⁺ = x + dt f  ⇒  A = I + dt ∂f/∂x, B = dt ∂f/∂u, C = dt ∂f/∂y
        let mut s_next = DenseMatrix::zeros(dx, nu);
        let mut p_next = DenseMatrix::zeros(dx, dy);
        for r in 0..dx {
            for c in 0..nu {
                let mut v = s_prev.get(r, c);
                for m in 0..dx {
                    v += ocp.dt * dfdx.get(r, m) * s_prev.get(m, c);
                }
                s_next.set(r, c, v);
            }
            for c in 0..du {
                let v = s_next.get(r, k * du + c) + ocp.dt * dfdu.get(r, c);
                s_next.set(r, k * du + c, v);
            }
            for c in 0..dy {
                let mut v = p_prev.get(r, c) + ocp.dt * dfdy.get(r, c);
                for m in 0..dx {
                    v += ocp.dt * dfdx.get(r, m) * p_prev.get(m, c);
                }
                p_next.set(r, c, v);
            }
        }
        let mut x_next = x.clone();
        x_next.axpy(ocp.dt, &f);
        for r in 0..dx {
            x_stack.push(x_next[r]);
            for c in 0..nu {
                s_mat.set(k * dx + r, c, s_next.get(r, c));
            }
            for c in 0..dy {
                p_mat.set(k * dx + r, c, p_next.get(r, c));
            }
        }
        x = x_next;
        s_prev = s_next;
        p_prev = p_next;
    }
    Rollout { x_stack: DenseVector::from_vec(x_stack), s_mat, p_mat }
}

/// Objective gradient 2u + 2ρ S_Nᵀ(x_N − p) at the base trajectory.
pub(crate) fn objective_gradient(
    ocp: &OcpProblem,
    u_flat: &DenseVector,
    roll: &Rollout,
) -> DenseVector {
    let dx = ocp.dynamics.dim_x();
    let n_states = ocp.n_states();
    let mut g = u_flat.scale(2.0);
    for r in 0..dx {
        let row = n_states - dx + r;
        let resid = roll.x_stack[row] - ocp.terminal_ref[r];
        let w = 2.0 * ocp.terminal_weight * resid;
        if w != 0.0 {
            for c in 0..g.len() {
                g[c] += w * roll.s_mat.get(row, c);
            }
        }
    }
    g
}

/// Total ℓ1 state-bound violation of a state stack.
fn bound_violation_l1(ocp: &OcpProblem, x_stack: &DenseVector) -> f64 {
    let dx = ocp.dynamics.dim_x();
    let mut v = 0.0;
    for (i, xv) in x_stack.iter().enumerate() {
        let d = i % dx;
        v += (ocp.state_bounds.lo[d] - xv).max(0.0) + (xv - ocp.state_bounds.hi[d]).max(0.0);
    }
    v
}

fn bound_violation_inf(ocp: &OcpProblem, x_stack: &DenseVector) -> f64 {
    let dx = ocp.dynamics.dim_x();
    let mut v = 0.0_f64;
    for (i, xv) in x_stack.iter().enumerate() {
        let d = i % dx;
        v = v.max(ocp.state_bounds.lo[d] - xv).max(xv - ocp.state_bounds.hi[d]);
    }
    v
}

/// Exact objective Hessian by central differences of the gradient, then
/// Levenberg-style convexification (the subproblem must stay convex).
/// Gauss-Newton curvature alone converges only linearly near the optimum
/// because it drops the residual-weighted second-order rollout terms.
pub(crate) fn exact_objective_hessian(
    ocp: &OcpProblem,
    u_flat: &DenseVector,
    y: &DenseVector,
) -> DenseMatrix {
    let nu = u_flat.len();
    let mut hess = DenseMatrix::zeros(nu, nu);
    for j in 0..nu {
        let h = 1e-6 * (1.0 + u_flat[j].abs());
        let mut up = u_flat.clone();
        up[j] += h;
        let rp = rollout_with_sens(ocp, &up, y);
        let gp = objective_gradient(ocp, &up, &rp);
        let mut um = u_flat.clone();
        um[j] -= h;
        let rm = rollout_with_sens(ocp, &um, y);
        let gm = objective_gradient(ocp, &um, &rm);
        for r in 0..nu {
            hess.set(r, j, (gp[r] - gm[r]) / (2.0 * h));
        }
    }
    let mut hess = hess.add(&hess.transpose()).scale(0.5);
    // Near a state-constraint boundary the smoothed-sqrt curvature blows
    // up (∝ eps_sq^{-3/2}); fall back to the bounded Gauss-Newton model.
    if !hess.all_finite() || hess.max_abs() > 1e7 {
        let roll = rollout_with_sens(ocp, u_flat, y);
        let dx = ocp.dynamics.dim_x();
        let n_states = ocp.n_states();
        hess = DenseMatrix::identity(nu).scale(2.0);
        for r in (n_states - dx)..n_states {
            for a in 0..nu {
                let sa = roll.s_mat.get(r, a);
                if sa != 0.0 {
                    let w = 2.0 * ocp.terminal_weight * sa;
                    for b in 0..nu {
                        hess.set(a, b, hess.get(a, b) + w * roll.s_mat.get(r, b));
                    }
                }
            }
        }
    }
    let scale = hess.max_abs().max(1.0);
    let mut ridge = 0.0;
    loop {
        let attempt = if ridge == 0.0 {
            hess.clone()
        } else {
            let mut a = hess.clone();
            for i in 0..nu {
                a.set(i, i, a.get(i, i) + ridge);
            }
            a
        };
        if crate::numerics::CholeskyFactors::factor(&attempt).is_ok() {
            if ridge > 0.0 {
                for i in 0..nu {
                    hess.set(i, i, hess.get(i, i) + ridge);
                }
            }
            return hess;
        }
        ridge = if ridge == 0.0 { 1e-8 * scale } else { ridge * 10.0 };
    }
}

/// Assemble the trust-region subproblem at a base trajectory.
fn build_subproblem(
    ocp: &OcpProblem,
    u_flat: &DenseVector,
    roll: &Rollout,
    g: &DenseVector,
    hess: &DenseMatrix,
    trust: f64,
) -> (QpProblem, RowMap) {
    let nu = ocp.n_controls();
    let du = ocp.dynamics.dim_u();
    let dx = ocp.dynamics.dim_x();
    let n_states = ocp.n_states();
    let hess = hess.clone();

    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(2 * nu + 2 * n_states);
    let mut rhs: Vec<f64> = Vec::with_capacity(2 * nu + 2 * n_states);
    // Trust-region ∩ control-bound box: δ ≤ ub, −δ ≤ −lb.
    for j in 0..nu {
        let d = j % du;
        let ub = (ocp.control_bounds.hi[d] - u_flat[j]).min(trust);
        let lb = (ocp.control_bounds.lo[d] - u_flat[j]).max(-trust);
        let mut row = vec![0.0; nu];
        row[j] = 1.0;
        rows.push(row);
        rhs.push(ub);
        let mut row = vec![0.0; nu];
        row[j] = -1.0;
        rows.push(row);
        rhs.push(-lb);
    }
    // Linearized state bounds: x + Sδ within [lo, hi].
    let mut state_rows = Vec::new();
    for i in 0..n_states {
        let d = i % dx;
        if ocp.state_bounds.hi[d].is_finite() {
            rows.push(roll.s_mat.row(i).to_vec());
            rhs.push(ocp.state_bounds.hi[d] - roll.x_stack[i]);
            state_rows.push((i, 1.0));
        }
        if ocp.state_bounds.lo[d].is_finite() {
            rows.push(roll.s_mat.row(i).iter().map(|v| -v).collect());
            rhs.push(roll.x_stack[i] - ocp.state_bounds.lo[d]);
            state_rows.push((i, -1.0));
        }
    }
    let qp = QpProblem::new(
        hess,
        g.clone(),
        DenseMatrix::from_rows(&rows),
        DenseVector::from_vec(rhs),
    );
    (qp, RowMap { n_u: nu, state_rows })
}

/// Elastic relaxation: one shared slack on the state rows, heavily priced.
fn solve_elastic(qp: &QpProblem, row_map: &RowMap, penalty: f64, settings: &SqpSettings) -> Option<DenseVector> {
    let nu = qp.dim();
    let mi = qp.n_ineq();
    let mut hess = DenseMatrix::zeros(nu + 1, nu + 1);
    for r in 0..nu {
        for c in 0..nu {
            hess.set(r, c, qp.hess.get(r, c));
        }
    }
    hess.set(nu, nu, 1e-6);
    let mut lin = qp.lin.as_slice().to_vec();
    lin.push(penalty);
    let mut rows = Vec::with_capacity(mi + 1);
    let mut rhs = Vec::with_capacity(mi + 1);
    for i in 0..mi {
        let mut row = qp.ineq_mat.row(i).to_vec();
        let is_state_row = i >= 2 * row_map.n_u;
        row.push(if is_state_row { -1.0 } else { 0.0 });
        rows.push(row);
        rhs.push(qp.ineq_rhs[i]);
    }
    let mut t_row = vec![0.0; nu + 1];
    t_row[nu] = -1.0;
    rows.push(t_row);
    rhs.push(0.0);
    let eqp = QpProblem::new(
        hess,
        DenseVector::from_vec(lin),
        DenseMatrix::from_rows(&rows),
        DenseVector::from_vec(rhs),
    );
    solve_qp(&eqp, settings.qp_tol, settings.qp_max_iter)
        .ok()
        .map(|sol| DenseVector::from_vec(sol.z.as_slice()[..nu].to_vec()))
}

/// NLP KKT residual at the base point using state-row duals from the QP.
fn nlp_kkt_residual(
    ocp: &OcpProblem,
    u_flat: &DenseVector,
    roll: &Rollout,
    g: &DenseVector,
    qp_sol: &QpSolution,
    row_map: &RowMap,
) -> f64 {
    let nu = ocp.n_controls();
    let du = ocp.dynamics.dim_u();
    let dx = ocp.dynamics.dim_x();
    let mut eff = g.clone();
    let mut comp = 0.0_f64;
    for (pos, &(state_idx, sign)) in row_map.state_rows.iter().enumerate() {
        let lam = qp_sol.lambda[2 * row_map.n_u + pos];
        if lam != 0.0 {
            for c in 0..nu {
                eff[c] += lam * sign * roll.s_mat.get(state_idx, c);
            }
        }
        let d = state_idx % dx;
        let slack = if sign > 0.0 {
            ocp.state_bounds.hi[d] - roll.x_stack[state_idx]
        } else {
            roll.x_stack[state_idx] - ocp.state_bounds.lo[d]
        };
        comp = comp.max((lam * slack).abs());
    }
    let mut stat = 0.0_f64;
    for j in 0..nu {
        let d = j % du;
        let proj = (u_flat[j] - eff[j])
            .max(ocp.control_bounds.lo[d])
            .min(ocp.control_bounds.hi[d]);
        stat = stat.max((u_flat[j] - proj).abs());
    }
    stat.max(bound_violation_inf(ocp, &roll.x_stack)).max(comp)
}

pub fn solve_ocp_sqp(ocp: &OcpProblem, y: &DenseVector, settings: &SqpSettings) -> OcpSolution {
    solve_ocp_sqp_warm(ocp, y, settings, None)
}

/// Same as [`solve_ocp_sqp`] with an optional warm-start control stack.
pub fn solve_ocp_sqp_warm(
    ocp: &OcpProblem,
    y: &DenseVector,
    settings: &SqpSettings,
    warm: Option<&DenseVector>,
) -> OcpSolution {
    let nu = ocp.n_controls();
    let du = ocp.dynamics.dim_u();
    let mut u = match warm {
        Some(w) if w.len() == nu => w.clone(),
        _ => DenseVector::from_vec(
            (0..nu)
                .map(|j| {
                    let d = j % du;
                    let (lo, hi) = (ocp.control_bounds.lo[d], ocp.control_bounds.hi[d]);
                    if lo.is_finite() && hi.is_finite() {
                        0.5 * (lo + hi)
                    } else {
                        0.0
                    }
                })
                .collect(),
        ),
    };

    let merit_pi = (10.0 * ocp.terminal_weight).max(100.0);
    let mut trust = settings.trust_init;
    let mut roll = rollout_with_sens(ocp, &u, y);
    let mut obj = ocp.objective(&u, &roll.x_stack);
    let mut merit = obj + merit_pi * bound_violation_l1(ocp, &roll.x_stack);
    let mut merit_trace = vec![merit];

    let mut converged = false;
    let mut kkt = f64::INFINITY;
    let mut iters = 0;
    let mut last = None;

    let mut point_data: Option<(DenseVector, DenseMatrix)> = None;
    for iter in 0..settings.max_iter {
        iters = iter + 1;
        // Zero-dual KKT check: when the state bounds hold and the projected
        // objective gradient already vanishes, the point is stationary with
        // zero multipliers. This needs no linearization, which matters at
        // the empty-tank corner where rollout sensitivities explode.
        {
            let g0 = objective_gradient(ocp, &u, &roll);
            let mut stat = 0.0_f64;
            for j in 0..nu {
                let d = j % du;
                let proj = (u[j] - g0[j])
                    .max(ocp.control_bounds.lo[d])
                    .min(ocp.control_bounds.hi[d]);
                stat = stat.max((u[j] - proj).abs());
            }
            let viol = bound_violation_inf(ocp, &roll.x_stack);
            if stat.max(viol) <= settings.tol {
                kkt = stat.max(viol);
                converged = true;
                break;
            }
        }
        let (g, hess) = match &point_data {
            Some((g, h)) => (g.clone(), h.clone()),
            None => {
                let g = objective_gradient(ocp, &u, &roll);
                let h = exact_objective_hessian(ocp, &u, y);
                point_data = Some((g.clone(), h.clone()));
                (g, h)
            }
        };
        let (qp, row_map) = build_subproblem(ocp, &u, &roll, &g, &hess, trust);
        let qp_sol = match solve_qp(&qp, settings.qp_tol, settings.qp_max_iter) {
            Ok(sol) if sol.status == QpStatus::Optimal => sol,
            _ => {
                // Infeasible linearization: elastic step toward feasibility.
                match solve_elastic(&qp, &row_map, merit_pi, settings) {
                    Some(dz) => {
                        let mut u_try = u.clone();
                        u_try.axpy(1.0, &dz);
                        let roll_try = rollout_with_sens(ocp, &u_try, y);
                        let obj_try = ocp.objective(&u_try, &roll_try.x_stack);
                        let merit_try =
                            obj_try + merit_pi * bound_violation_l1(ocp, &roll_try.x_stack);
                        if merit_try < merit {
                            u = u_try;
                            roll = roll_try;
                            obj = obj_try;
                            merit = merit_try;
                            merit_trace.push(merit);
                            point_data = None;
                        } else {
                            trust *= settings.trust_shrink;
                        }
                        continue;
                    }
                    None => {
                        trust *= settings.trust_shrink;
                        if trust < 1e-12 {
                            break;
                        }
                        continue;
                    }
                }
            }
        };

        kkt = nlp_kkt_residual(ocp, &u, &roll, &g, &qp_sol, &row_map);
        last = Some(FinalSubproblem {
            qp: qp.clone(),
            qp_sol: qp_sol.clone(),
            s_mat: roll.s_mat.clone(),
            p_mat: roll.p_mat.clone(),
            row_map: row_map.clone(),
        });
        if kkt <= settings.tol {
            converged = true;
            break;
        }

        let delta = &qp_sol.z;
        let step_norm = delta.norm_inf();
        if step_norm <= 1e-14 {
            // No progress possible at this trust radius.
            trust *= settings.trust_shrink;
            if trust < 1e-12 {
                break;
            }
            continue;
        }
        let mut u_try = u.clone();
        u_try.axpy(1.0, delta);
        let roll_try = rollout_with_sens(ocp, &u_try, y);
        let obj_try = ocp.objective(&u_try, &roll_try.x_stack);
        let viol_try = bound_violation_l1(ocp, &roll_try.x_stack);
        let merit_try = obj_try + merit_pi * viol_try;

        // Predicted merit decrease under the model (linearized rows feasible).
        let quad = 0.5 * delta.dot(&qp.hess.matvec(delta)) + g.dot(delta);
        let pred = merit_pi * bound_violation_l1(ocp, &roll.x_stack) - quad;
        let actual = merit - merit_try;
        let ratio = if pred > 1e-14 { actual / pred } else { -1.0 };

        if ratio >= 0.1 {
            u = u_try;
            roll = roll_try;
            obj = obj_try;
            merit = merit_try;
            merit_trace.push(merit);
            point_data = None;
            if ratio >= 0.75 && step_norm >= 0.9 * trust {
                trust = (trust * settings.trust_expand).min(10.0);
            }
        } else {
            trust *= settings.trust_shrink;
            if trust < 1e-12 {
                break;
            }
        }
    }

    let final_subproblem = match last {
        Some(f) => f,
        None => {
            let g = objective_gradient(ocp, &u, &roll);
            let hess = exact_objective_hessian(ocp, &u, y);
            let (qp, row_map) = build_subproblem(ocp, &u, &roll, &g, &hess, trust.max(1e-6));
            let qp_sol = solve_qp(&qp, settings.qp_tol, settings.qp_max_iter).unwrap_or(QpSolution {
                z: DenseVector::zeros(nu),
                lambda: DenseVector::zeros(qp.n_ineq()),
                mu: DenseVector::zeros(0),
                kkt_residual: f64::INFINITY,
                status: QpStatus::MaxIter,
                iterations: 0,
            });
            FinalSubproblem {
                qp,
                qp_sol,
                s_mat: roll.s_mat.clone(),
                p_mat: roll.p_mat.clone(),
                row_map,
            }
        }
    };

    let dx = ocp.dynamics.dim_x();
    let x_traj: Vec<DenseVector> = (0..ocp.horizon)
        .map(|k| DenseVector::from_vec(roll.x_stack.as_slice()[k * dx..(k + 1) * dx].to_vec()))
        .collect();
    let u_traj: Vec<DenseVector> = (0..ocp.horizon)
        .map(|k| DenseVector::from_vec(u.as_slice()[k * du..(k + 1) * du].to_vec()))
        .collect();
    OcpSolution {
        x: x_traj,
        u: u_traj,
        objective: obj,
        sqp_iters: iters,
        converged,
        kkt_residual: kkt,
        merit_trace,
        final_subproblem,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ocp::{euler_step, ocp_jacobian, Dynamics, TwoTankDynamics};
    use approx::assert_abs_diff_eq;

    /// x⁺ = x + dt·u (dim 1), test-local.
    struct Integrator;
    impl Dynamics for Integrator {
        fn dim_x(&self) -> usize { 1 }
        fn dim_u(&self) -> usize { 1 }
        fn dim_y(&self) -> usize { 1 }
        fn deriv(&self, _x: &DenseVector, u: &DenseVector, _y: &DenseVector) -> DenseVector {
            DenseVector::from_vec(vec![u[0]])
        }
        fn jac(&self, _x: &DenseVector, _u: &DenseVector, _y: &DenseVector) -> (DenseMatrix, DenseMatrix, DenseMatrix) {
            (DenseMatrix::zeros(1, 1), DenseMatrix::identity(1), DenseMatrix::zeros(1, 1))
        }
    }

    /// x⁺ = x + dt·y·u (dim 1), design-scaled gain.
    struct ScaledGain;
    impl Dynamics for ScaledGain {
        fn dim_x(&self) -> usize { 1 }
        fn dim_u(&self) -> usize { 1 }
        fn dim_y(&self) -> usize { 1 }
        fn deriv(&self, _x: &DenseVector, u: &DenseVector, y: &DenseVector) -> DenseVector {
            DenseVector::from_vec(vec![y[0] * u[0]])
        }
        fn jac(&self, _x: &DenseVector, u: &DenseVector, y: &DenseVector) -> (DenseMatrix, DenseMatrix, DenseMatrix) {
            (
                DenseMatrix::zeros(1, 1),
                DenseMatrix::from_rows(&[vec![y[0]]]),
                DenseMatrix::from_rows(&[vec![u[0]]]),
            )
        }
    }

    fn two_tank_problem(n: usize, dt: f64, p: (f64, f64), rho: f64) -> OcpProblem {
        OcpProblem {
            dynamics: Arc::new(TwoTankDynamics),
            x0: DenseVector::zeros(2),
            horizon: n,
            dt,
            control_bounds: BoxSet::uniform(2, 0.0, 1.0),
            state_bounds: BoxSet::uniform(2, 0.0, 1.0),
            terminal_ref: DenseVector::from_vec(vec![p.0, p.1]),
            terminal_weight: rho,
        }
    }

    #[test]
    fn scalar_quadratic_optimum() {
        // N=1, x⁺=u, ρ=1, p=0.5, cost u² + (x⁺−p)² → u = 0.25
        let ocp = OcpProblem {
            dynamics: Arc::new(Integrator),
            x0: DenseVector::zeros(1),
            horizon: 1,
            dt: 1.0,
            control_bounds: BoxSet::uniform(1, 0.0, 1.0),
            state_bounds: BoxSet::uniform(1, 0.0, 1.0),
            terminal_ref: DenseVector::from_vec(vec![0.5]),
            terminal_weight: 1.0,
        };
        let y = DenseVector::from_vec(vec![0.0]);
        let sol = solve_ocp_sqp(&ocp, &y, &SqpSettings::default());
        assert!(sol.converged);
        assert_abs_diff_eq!(sol.u[0][0], 0.25, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.objective, 0.25f64.powi(2) + 0.25f64.powi(2), epsilon = 1e-8);
    }

    #[test]
    fn zero_penalty_interior_start() {
        // ρ=0 from an interior state: unforced optimum u ≡ 0 and zero
        // control sensitivity (states still drain through y₂).
        let mut ocp = two_tank_problem(10, 0.5, (0.3, 0.5), 0.0);
        ocp.x0 = DenseVector::from_vec(vec![0.5, 0.5]);
        let y = DenseVector::from_vec(vec![0.2, 0.1]);
        let sol = solve_ocp_sqp(&ocp, &y, &SqpSettings::default());
        assert!(sol.converged, "kkt {}", sol.kkt_residual);
        assert!(sol.objective <= 1e-10, "objective {}", sol.objective);
        for uk in &sol.u {
            assert!(uk.norm_inf() <= 1e-6);
        }
        let jac = ocp_jacobian(&ocp, &y, &sol, 1e-6).unwrap();
        let nu = ocp.n_controls();
        let ns = ocp.n_states();
        for r in 0..nu {
            for c in 0..2 {
                assert!(jac.get(ns + r, c).abs() <= 1e-5, "du/dy nonzero: {}", jac.get(ns + r, c));
            }
        }
    }

    #[test]
    fn scaled_gain_analytic_sensitivity() {
        // N=1, x⁺ = y·u, J = u² + (yu − 0.5)²:
        // u*(y) = 0.5y/(1+y²), du/dy = 0.5(1−y²)/(1+y²)².
        let ocp = OcpProblem {
            dynamics: Arc::new(ScaledGain),
            x0: DenseVector::zeros(1),
            horizon: 1,
            dt: 1.0,
            control_bounds: BoxSet::uniform(1, 0.0, 1.0),
            state_bounds: BoxSet::uniform(1, 0.0, 1.0),
            terminal_ref: DenseVector::from_vec(vec![0.5]),
            terminal_weight: 1.0,
        };
        let yv = 0.8;
        let y = DenseVector::from_vec(vec![yv]);
        let sol = solve_ocp_sqp(&ocp, &y, &SqpSettings::default());
        assert!(sol.converged);
        let u_star = 0.5 * yv / (1.0 + yv * yv);
        assert_abs_diff_eq!(sol.u[0][0], u_star, epsilon = 1e-7);
        let jac = ocp_jacobian(&ocp, &y, &sol, 1e-6).unwrap();
        let du_dy = 0.5 * (1.0 - yv * yv) / (1.0 + yv * yv).powi(2);
        assert_abs_diff_eq!(jac.get(1, 0), du_dy, epsilon = 1e-5);
        // dx/dy = u + y·du/dy
        assert_abs_diff_eq!(jac.get(0, 0), u_star + yv * du_dy, epsilon = 1e-5);
    }

    /// Independent oracle: projected gradient descent on the control box
    /// with finite-difference gradients and backtracking.
    fn pgd_reference(ocp: &OcpProblem, y: &DenseVector, iters: usize) -> (DenseVector, f64) {
        let nu = ocp.n_controls();
        let du = ocp.dynamics.dim_u();
        let clamp = |u: &DenseVector| {
            DenseVector::from_vec(
                (0..nu)
                    .map(|j| {
                        let d = j % du;
                        u[j].max(ocp.control_bounds.lo[d]).min(ocp.control_bounds.hi[d])
                    })
                    .collect(),
            )
        };
        let eval = |u: &DenseVector| {
            let roll = rollout_with_sens(ocp, u, y);
            ocp.objective(u, &roll.x_stack)
        };
        let mut u = clamp(&DenseVector::filled(nu, 0.5));
        let mut obj = eval(&u);
        let mut step = 0.05;
        for _ in 0..iters {
            let h = 1e-6;
            let mut grad = DenseVector::zeros(nu);
            for j in 0..nu {
                let mut up = u.clone();
                up[j] += h;
                let mut um = u.clone();
                um[j] -= h;
                grad[j] = (eval(&up) - eval(&um)) / (2.0 * h);
            }
            let mut improved = false;
            for _ in 0..30 {
                let mut cand = u.clone();
                cand.axpy(-step, &grad);
                let cand = clamp(&cand);
                let cobj = eval(&cand);
                if cobj < obj - 1e-14 {
                    u = cand;
                    obj = cobj;
                    step *= 1.3;
                    improved = true;
                    break;
                }
                step *= 0.5;
            }
            if !improved && step < 1e-12 {
                break;
            }
        }
        (u, obj)
    }

    #[test]
    fn two_tank_matches_projected_gradient_oracle() {
        let ocp = two_tank_problem(20, 0.5, (0.3, 0.5), 100.0);
        let y = DenseVector::from_vec(vec![0.2, 0.1]);
        let sol = solve_ocp_sqp(&ocp, &y, &SqpSettings::default());
        assert!(sol.converged, "kkt {}", sol.kkt_residual);
        let (_, obj_ref) = pgd_reference(&ocp, &y, 400);
        assert!(
            (sol.objective - obj_ref).abs() <= 1e-3 * (1.0 + obj_ref.abs()),
            "sqp {} vs pgd {}",
            sol.objective,
            obj_ref
        );
        // SQP should never be worse than the first-order reference.
        assert!(sol.objective <= obj_ref + 1e-6);
    }

    #[test]
    fn dynamics_residual_and_merit_monotone() {
        let ocp = two_tank_problem(20, 0.5, (0.4, 0.6), 100.0);
        let y = DenseVector::from_vec(vec![0.25, 0.15]);
        let sol = solve_ocp_sqp(&ocp, &y, &SqpSettings::default());
        assert!(sol.converged);
        // Exact rollout consistency through the public euler step.
        let mut x = ocp.x0.clone();
        for k in 0..ocp.horizon {
            let next = euler_step(&x, &sol.u[k], &y, ocp.dt).unwrap();
            let resid = next.sub(&sol.x[k]).norm_inf();
            assert!(resid <= 1e-7, "dynamics residual {resid} at step {k}");
            x = sol.x[k].clone();
        }
        // Bounds within tolerance.
        for xk in &sol.x {
            for i in 0..2 {
                assert!(xk[i] >= -1e-6 && xk[i] <= 1.0 + 1e-6);
            }
        }
        // Merit nonincreasing across accepted iterations.
        for w in sol.merit_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-10, "merit increased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn two_tank_sensitivities_match_fd() {
        let tight = SqpSettings { tol: 1e-10, max_iter: 200, ..SqpSettings::default() };
        let ocp = two_tank_problem(20, 0.5, (0.3, 0.5), 100.0);
        let y = DenseVector::from_vec(vec![0.2, 0.1]);
        let sol = solve_ocp_sqp(&ocp, &y, &tight);
        assert!(sol.converged);
        let jac = ocp_jacobian(&ocp, &y, &sol, 1e-6).unwrap();
        let h = 1e-4;
        let mut max_rel = 0.0_f64;
        for m in 0..2 {
            let mut yp = y.clone();
            yp[m] += h;
            let mut ym = y.clone();
            ym[m] -= h;
            let sp = solve_ocp_sqp_warm(&ocp, &yp, &tight, Some(&sol.u_flat()));
            let sm = solve_ocp_sqp_warm(&ocp, &ym, &tight, Some(&sol.u_flat()));
            assert!(sp.converged && sm.converged);
            let zp = sp.z_flat();
            let zm = sm.z_flat();
            let mut num = 0.0;
            let mut den = 0.0;
            for r in 0..zp.len() {
                let fd = (zp[r] - zm[r]) / (2.0 * h);
                num += (jac.get(r, m) - fd).powi(2);
                den += fd.powi(2);
            }
            max_rel = max_rel.max((num / den.max(1e-12)).sqrt());
        }
        assert!(max_rel <= 1e-3, "relative sensitivity error {max_rel}");
    }
}
