//! Building HVAC co-design on a synthetic 2-zone RC thermal model.
//!
//! States per zone: floor, wall, indoor air, exterior facade (8 total).
//! The actuator design Y ∈ ℝ^{8×2} maps two heat inputs u into the states:
//! x⁽ᵏ⁺¹⁾ = A x⁽ᵏ⁾ + Y u⁽ᵏ⁾ + E d⁽ᵏ⁾, with indoor-air temperatures
//! w⁽ᵏ⁾ = C x⁽ᵏ⁾ required to stay inside time-varying bounds [p̲, p̄].
//!
//! The bound constraints are lifted to the upper level through slack
//! variables: the lower level is a QP over (u, s̲, s̄) with slacked bounds
//! and a quadratic slack penalty; the coupling constraint is the no-slack
//! condition, so ν is the stacked slack vector. The design variable enters
//! the lower QP's constraint *matrix* (bilinearly with u through the
//! rollout), which is why the layer differentiates through structured
//! matrix perturbations.

use crate::coupling::{ConstraintKind, CouplingSpec, SelectCoupling};
use crate::numerics::{DenseMatrix, DenseVector, RngStream};
use crate::problem::{
    BilevelProblem, LayerError, LowerDetail, LowerLayer, LowerSolution, QuadObjective, UpperSet,
};
use crate::qp::{solve_qp, qp_directional_jacobian, BoxSet, QpDirection, QpProblem};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HvacFamily {
    pub horizon: usize,
    pub n_states: usize,
    pub n_zones: usize,
    /// State transition A (spectral radius < 1: facades leak to a 0-degree
    /// ambient, so the uncontrolled building cools toward the bound floor).
    pub a_mat: DenseMatrix,
    /// Output map C selecting the indoor-air states.
    pub c_mat: DenseMatrix,
    /// Disturbance map E (occupancy heat to air, solar to wall/facade).
    pub e_mat: DenseMatrix,
    pub x0: DenseVector,
    /// Slack penalty weight in the lower objective.
    pub rho_slack: f64,
    /// p̄ = p̲ + bound_gap exactly.
    pub bound_gap: f64,
    /// Fixed shared disturbance trajectory (length horizon, dim 2).
    pub disturbance: Vec<DenseVector>,
    /// β-random-walk parameters of the bound trajectories.
    pub walk_start: f64,
    pub walk_step: f64,
    pub seed: u64,
}

/// Lower-bound trajectory; the upper bound is p̲ + bound_gap.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HvacInstance {
    pub p_lo: Vec<DenseVector>,
}

impl HvacInstance {
    /// MLP input: (p̲, p̄) stacked, matching the problem parameterization.
    pub fn param_vec(&self, gap: f64) -> DenseVector {
        let mut v: Vec<f64> = self.p_lo.iter().flat_map(|p| p.as_slice().to_vec()).collect();
        let hi: Vec<f64> = v.iter().map(|x| x + gap).collect();
        v.extend(hi);
        DenseVector::from_vec(v)
    }
}

/// Occupancy square wave + solar half-sinusoid + seeded noise, entries
/// clamped to [0, 2]. Fixed across instances.
pub fn synth_disturbance(n: usize, seed: u64) -> Vec<DenseVector> {
    let mut rng = RngStream::substream(seed, 7);
    (0..n)
        .map(|k| {
            let occupancy = if k % 10 < 5 { 0.8 } else { 0.1 };
            let solar = (std::f64::consts::PI * k as f64 / n as f64).sin();
            let d0 = (occupancy + rng.uniform(-0.05, 0.05)).clamp(0.0, 2.0);
            let d1 = (solar + rng.uniform(-0.05, 0.05)).clamp(0.0, 2.0);
            DenseVector::from_vec(vec![d0, d1])
        })
        .collect()
}

/// Node layout per zone: floor, wall, air, facade.
const FLOOR: usize = 0;
const WALL: usize = 1;
const AIR: usize = 2;
const FACADE: usize = 3;

pub fn default_hvac_family(seed: u64) -> HvacFamily {
    let n_states = 8;
    let n_zones = 2;
    let horizon = 30;
    let mut a = DenseMatrix::identity(n_states);
    let mut couple = |i: usize, j: usize, c: f64| {
        a.set(i, i, a.get(i, i) - c);
        a.set(j, j, a.get(j, j) - c);
        a.set(i, j, a.get(i, j) + c);
        a.set(j, i, a.get(j, i) + c);
    };
    for z in 0..n_zones {
        let b = 4 * z;
        couple(b + AIR, b + FLOOR, 0.06);
        couple(b + AIR, b + WALL, 0.06);
        couple(b + AIR, b + FACADE, 0.05);
    }
    couple(WALL, 4 + WALL, 0.04);
    // Leakage to the (0-degree) ambient: facade conduction plus air
    // infiltration. Calibrated so the uncontrolled building cools through
    // the comfort floor within the horizon while never rising above the
    // ceiling (heating-only actuation cannot remove heat).
    for z in 0..n_zones {
        let c = 4 * z + FACADE;
        a.set(c, c, a.get(c, c) - 0.08);
        let air = 4 * z + AIR;
        a.set(air, air, a.get(air, air) - 0.03);
    }
    let mut c_mat = DenseMatrix::zeros(n_zones, n_states);
    for z in 0..n_zones {
        c_mat.set(z, 4 * z + AIR, 1.0);
    }
    let mut e_mat = DenseMatrix::zeros(n_states, 2);
    for z in 0..n_zones {
        e_mat.set(4 * z + AIR, 0, 0.3);
        e_mat.set(4 * z + FACADE, 1, 0.4);
        e_mat.set(4 * z + WALL, 1, 0.2);
    }
    HvacFamily {
        horizon,
        n_states,
        n_zones,
        a_mat: a,
        c_mat,
        e_mat,
        x0: DenseVector::filled(n_states, 19.0),
        rho_slack: 100.0,
        bound_gap: 2.0,
        disturbance: synth_disturbance(horizon, seed),
        walk_start: 18.0,
        walk_step: 1.0,
        seed,
    }
}

/// Bound trajectories from a β(2,2)-random walk (independent per zone).
pub fn sample_hvac_instances(
    family: &HvacFamily,
    count: usize,
    seed: u64,
    stream: u64,
) -> Vec<HvacInstance> {
    let mut rng = RngStream::substream(seed, 100 + stream);
    (0..count)
        .map(|_| {
            let mut level = vec![family.walk_start; family.n_zones];
            let p_lo = (0..family.horizon)
                .map(|_| {
                    for l in level.iter_mut() {
                        *l += (rng.beta22() - 0.5) * family.walk_step;
                    }
                    DenseVector::from_vec(level.clone())
                })
                .collect();
            HvacInstance { p_lo }
        })
        .collect()
}

/// Family-level solver data shared by every instance: the QP structure and
/// the 16 constraint-matrix directions ∂F/∂Y_l.
pub struct HvacShared {
    pub family: HvacFamily,
    hess: DenseMatrix,
    f0: DenseMatrix,
    basis_dense: Vec<DenseMatrix>,
    basis_sparse: Vec<Vec<(u32, u32, f64)>>,
    /// C(Aᵏx⁰ + Σ A^{k−1−j} E d⁽ʲ⁾): the uncontrolled output rollout.
    w_free: DenseVector,
    n_u: usize,
    n_z: usize,
    n_rows: usize,
    tol: f64,
    max_iter: usize,
    act_tol: f64,
}

impl HvacShared {
    pub fn new(family: HvacFamily) -> Self {
        let n = family.horizon;
        let nz = family.n_zones;
        let nx = family.n_states;
        let n_u = n * nz;
        let n_z = 3 * n_u;
        let n_rows = 6 * n_u;

        // Powers of A and C·Aᵗ.
        let mut a_pow = vec![DenseMatrix::identity(nx)];
        for _ in 1..n {
            a_pow.push(family.a_mat.matmul(a_pow.last().unwrap()));
        }
        let ca: Vec<DenseMatrix> = a_pow.iter().map(|p| family.c_mat.matmul(p)).collect();

        // Uncontrolled rollout for the free output term.
        let mut w_free = DenseVector::zeros(n_u);
        let mut x = family.x0.clone();
        for k in 1..=n {
            let mut next = family.a_mat.matvec(&x);
            next.axpy(1.0, &family.e_mat.matvec(&family.disturbance[k - 1]));
            x = next;
            let w = family.c_mat.matvec(&x);
            for z in 0..nz {
                w_free[(k - 1) * nz + z] = w[z];
            }
        }

        let mut hess = DenseMatrix::zeros(n_z, n_z);
        for i in 0..n_u {
            hess.set(i, i, 2.0);
            hess.set(n_u + i, n_u + i, 2.0 * family.rho_slack);
            hess.set(2 * n_u + i, 2 * n_u + i, 2.0 * family.rho_slack);
        }

        // Y-independent rows: u ≤ 1, −u ≤ 0, −s̲ ≤ 0, −s̄ ≤ 0, then the
        // w-bound rows carrying only their slack entries.
        let mut f0 = DenseMatrix::zeros(n_rows, n_z);
        for j in 0..n_u {
            f0.set(j, j, 1.0);
            f0.set(n_u + j, j, -1.0);
            f0.set(2 * n_u + j, n_u + j, -1.0);
            f0.set(3 * n_u + j, 2 * n_u + j, -1.0);
            f0.set(4 * n_u + j, n_u + j, -1.0); // w-lower: −s̲ term
            f0.set(5 * n_u + j, 2 * n_u + j, -1.0); // w-upper: −s̄ term
        }

        // ∂F/∂Y_l for the 16 vectorized entries (row-major r*nz + c):
        // w(k) row gets ±(C A^{k−1−j})[zone, r] at u column (j, c).
        let mut basis_dense = Vec::with_capacity(nx * nz);
        let mut basis_sparse = Vec::with_capacity(nx * nz);
        for r in 0..nx {
            for cc in 0..nz {
                let mut dense = DenseMatrix::zeros(n_rows, n_z);
                let mut sparse = Vec::new();
                for k in 1..=n {
                    for j in 0..k {
                        for zone in 0..nz {
                            let v = ca[k - 1 - j].get(zone, r);
                            if v != 0.0 {
                                let w_idx = (k - 1) * nz + zone;
                                let u_col = j * nz + cc;
                                let lo_row = 4 * n_u + w_idx;
                                let hi_row = 5 * n_u + w_idx;
                                dense.set(lo_row, u_col, -v);
                                dense.set(hi_row, u_col, v);
                                sparse.push((lo_row as u32, u_col as u32, -v));
                                sparse.push((hi_row as u32, u_col as u32, v));
                            }
                        }
                    }
                }
                basis_dense.push(dense);
                basis_sparse.push(sparse);
            }
        }
        Self {
            family,
            hess,
            f0,
            basis_dense,
            basis_sparse,
            w_free,
            n_u,
            n_z,
            n_rows,
            tol: crate::qp::DEFAULT_TOL,
            max_iter: crate::qp::DEFAULT_MAX_ITER,
            act_tol: crate::qp::DEFAULT_ACT_TOL,
        }
    }

    pub fn dim_y(&self) -> usize {
        self.family.n_states * self.family.n_zones
    }

    /// Per-instance right-hand side.
    fn instance_rhs(&self, instance: &HvacInstance) -> DenseVector {
        let n_u = self.n_u;
        let nz = self.family.n_zones;
        let mut rhs = DenseVector::zeros(self.n_rows);
        for j in 0..n_u {
            rhs[j] = 1.0; // u ≤ 1
        }
        for (k, p) in instance.p_lo.iter().enumerate() {
            for z in 0..nz {
                let w = k * nz + z;
                rhs[4 * n_u + w] = self.w_free[w] - p[z];
                rhs[5 * n_u + w] = p[z] + self.family.bound_gap - self.w_free[w];
            }
        }
        rhs
    }

    fn assemble(&self, y: &DenseVector, rhs: &DenseVector) -> QpProblem {
        let mut f = self.f0.clone();
        for (l, triplets) in self.basis_sparse.iter().enumerate() {
            let yl = y[l];
            if yl != 0.0 {
                for &(r, c, v) in triplets {
                    let cur = f.get(r as usize, c as usize);
                    f.set(r as usize, c as usize, cur + yl * v);
                }
            }
        }
        QpProblem::new(self.hess.clone(), DenseVector::zeros(self.n_z), f, rhs.clone())
    }
}

/// Per-instance differentiable lower level over z = (u, s̲, s̄).
pub struct HvacLayer {
    pub shared: Arc<HvacShared>,
    rhs: DenseVector,
}

impl HvacLayer {
    pub fn new(shared: Arc<HvacShared>, instance: &HvacInstance) -> Self {
        let rhs = shared.instance_rhs(instance);
        Self { shared, rhs }
    }
}

impl LowerLayer for HvacLayer {
    fn dim_y(&self) -> usize {
        self.shared.dim_y()
    }

    fn dim_z(&self) -> usize {
        self.shared.n_z
    }

    fn tolerance(&self) -> f64 {
        self.shared.tol
    }

    fn solve(&self, y: &DenseVector, _warm: Option<&LowerSolution>) -> Result<LowerSolution, LayerError> {
        let qp = self.shared.assemble(y, &self.rhs);
        let sol = solve_qp(&qp, self.shared.tol, self.shared.max_iter)?;
        if sol.kkt_residual > self.shared.tol {
            return Err(LayerError::LowerLevelFailure(format!(
                "interior point stalled at residual {:.3e}",
                sol.kkt_residual
            )));
        }
        Ok(LowerSolution {
            objective: qp.objective(&sol.z),
            kkt_residual: sol.kkt_residual,
            z: sol.z.clone(),
            detail: LowerDetail::Qp(sol),
        })
    }

    fn jacobian(&self, y: &DenseVector, sol: &LowerSolution) -> Result<DenseMatrix, LayerError> {
        let LowerDetail::Qp(qp_sol) = &sol.detail else {
            return Err(LayerError::LowerLevelFailure("wrong solution detail".into()));
        };
        let qp = self.shared.assemble(y, &self.rhs);
        let dirs: Vec<QpDirection<'_>> = self
            .shared
            .basis_dense
            .iter()
            .map(|b| QpDirection { d_ineq_mat: Some(b), ..QpDirection::default() })
            .collect();
        qp_directional_jacobian(&qp, qp_sol, &dirs, self.shared.act_tol).map_err(LayerError::from)
    }
}

pub fn assemble_hvac_with(shared: &Arc<HvacShared>, instance: &HvacInstance) -> BilevelProblem {
    let n_u = shared.n_u;
    let dim_y = shared.dim_y();
    let layer = HvacLayer::new(Arc::clone(shared), instance);
    // ν = stacked slacks (nonnegative by constraint, so the ReLU is the
    // identity on them): U = s ≤ 0 rows.
    let func = SelectCoupling {
        terms: (0..2 * n_u).map(|j| (n_u + j, 1.0)).collect(),
        offset: DenseVector::zeros(2 * n_u),
        kinds: vec![ConstraintKind::Inequality; 2 * n_u],
        dim_y,
        dim_z: shared.n_z,
    };
    let coupling = CouplingSpec::new(
        Arc::new(func),
        Arc::new(layer),
        UpperSet::Box(BoxSet::new(
            DenseVector::zeros(dim_y),
            DenseVector::filled(dim_y, f64::INFINITY),
        )),
    );
    BilevelProblem {
        objective: QuadObjective::linear(
            DenseVector::filled(dim_y, 1.0),
            DenseVector::zeros(shared.n_z),
        ),
        coupling: Arc::new(coupling),
    }
}

pub fn assemble_hvac(family: &HvacFamily, instance: &HvacInstance) -> BilevelProblem {
    assemble_hvac_with(&Arc::new(HvacShared::new(family.clone())), instance)
}

/// Dominant eigenvalue magnitude by power iteration.
pub fn spectral_radius(a: &DenseMatrix, iters: usize) -> f64 {
    let n = a.rows();
    let mut v = DenseVector::filled(n, 1.0 / (n as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..iters {
        let av = a.matvec(&v);
        lambda = av.norm2();
        if lambda == 0.0 {
            return 0.0;
        }
        v = av.scale(1.0 / lambda);
    }
    lambda
}
