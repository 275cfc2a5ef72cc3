//! Two-tank control co-design: minimize vᵀy over valve coefficients
//! y ∈ [0, 1/3]² subject to the pump/valve optimal-control policy reaching
//! the terminal reference p, with the terminal condition lifted to the
//! upper level as an equality coupling constraint and replaced below by a
//! penalty ρ‖x⁽ᴺ⁾ − p‖².

use crate::coupling::{ConstraintKind, CouplingSpec, SelectCoupling};
use crate::numerics::{DenseMatrix, DenseVector, RngStream};
use crate::ocp::{ocp_jacobian, solve_ocp_sqp_warm, OcpProblem, SqpSettings, TwoTankDynamics};
use crate::problem::{
    BilevelProblem, LayerError, LowerDetail, LowerLayer, LowerSolution, QuadObjective, UpperSet,
};
use crate::qp::BoxSet;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TwoTankFamily {
    pub total_time: f64,
    pub horizon: usize,
    /// Design bounds [y_min, y_max] per coordinate.
    pub y_min: f64,
    pub y_max: f64,
    /// Terminal penalty weight ρ in the reformulated lower level.
    pub terminal_weight: f64,
    /// Upper objective coefficients v (all ones).
    pub cost: DenseVector,
    pub seed: u64,
}

impl Default for TwoTankFamily {
    fn default() -> Self {
        Self {
            total_time: 10.0,
            horizon: 20,
            y_min: 0.0,
            y_max: 1.0 / 3.0,
            terminal_weight: 100.0,
            cost: DenseVector::filled(2, 1.0),
            seed: 0,
        }
    }
}

impl TwoTankFamily {
    pub fn dt(&self) -> f64 {
        self.total_time / self.horizon as f64
    }
}

/// Terminal reference p with p₁ < p₂ (feasibility of the design problem).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TwoTankInstance {
    pub p: DenseVector,
}

impl TwoTankInstance {
    pub fn param_vec(&self) -> DenseVector {
        self.p.clone()
    }
}

/// Rejection-sample references from U(0,1)² until p₁ < p₂.
pub fn sample_twotank_instances(count: usize, seed: u64, stream: u64) -> Vec<TwoTankInstance> {
    let mut rng = RngStream::substream(seed, stream);
    (0..count)
        .map(|_| loop {
            let a = rng.next_f64();
            let b = rng.next_f64();
            if a < b {
                break TwoTankInstance { p: DenseVector::from_vec(vec![a, b]) };
            }
        })
        .collect()
}

/// The nonconvex lower level as a differentiable layer: z := (x, u).
pub struct TwoTankLayer {
    pub ocp: OcpProblem,
    pub settings: SqpSettings,
    pub act_tol: f64,
}

impl TwoTankLayer {
    pub fn new(family: &TwoTankFamily, instance: &TwoTankInstance) -> Self {
        let ocp = OcpProblem {
            dynamics: Arc::new(TwoTankDynamics),
            x0: DenseVector::zeros(2),
            horizon: family.horizon,
            dt: family.dt(),
            control_bounds: BoxSet::uniform(2, 0.0, 1.0),
            state_bounds: BoxSet::uniform(2, 0.0, 1.0),
            terminal_ref: instance.p.clone(),
            terminal_weight: family.terminal_weight,
        };
        Self { ocp, settings: SqpSettings::default(), act_tol: 1e-6 }
    }
}

impl LowerLayer for TwoTankLayer {
    fn dim_y(&self) -> usize {
        2
    }

    fn dim_z(&self) -> usize {
        self.ocp.n_states() + self.ocp.n_controls()
    }

    fn tolerance(&self) -> f64 {
        self.settings.tol
    }

    fn solve(&self, y: &DenseVector, warm: Option<&LowerSolution>) -> Result<LowerSolution, LayerError> {
        let warm_u = warm.and_then(|w| match &w.detail {
            LowerDetail::Ocp(sol) => Some(sol.u_flat()),
            _ => None,
        });
        // Fallback starts cover the stiff empty-tank corner, where the
        // midpoint start crawls but u = 0 is an exact stationary point.
        let nu = self.ocp.n_controls();
        let mut starts: Vec<Option<DenseVector>> = Vec::with_capacity(4);
        if warm_u.is_some() {
            starts.push(warm_u);
        }
        starts.push(None);
        starts.push(Some(DenseVector::zeros(nu)));
        starts.push(Some(DenseVector::filled(nu, 0.05)));
        let mut last_kkt = f64::INFINITY;
        let mut last_iters = 0;
        for start in &starts {
            let sol = solve_ocp_sqp_warm(&self.ocp, y, &self.settings, start.as_ref());
            last_kkt = sol.kkt_residual;
            last_iters = sol.sqp_iters;
            if sol.converged {
                return Ok(LowerSolution {
                    z: sol.z_flat(),
                    objective: sol.objective,
                    kkt_residual: sol.kkt_residual,
                    detail: LowerDetail::Ocp(sol),
                });
            }
        }
        Err(LayerError::LowerLevelFailure(format!(
            "SQP did not converge (kkt {last_kkt:.3e} after {last_iters} iters)"
        )))
    }

    fn jacobian(&self, y: &DenseVector, sol: &LowerSolution) -> Result<DenseMatrix, LayerError> {
        let LowerDetail::Ocp(ocp_sol) = &sol.detail else {
            return Err(LayerError::LowerLevelFailure("wrong solution detail".into()));
        };
        ocp_jacobian(&self.ocp, y, ocp_sol, self.act_tol).map_err(LayerError::from)
    }
}

/// Indices of x⁽ᴺ⁾ inside z = (x, u).
fn terminal_indices(family: &TwoTankFamily) -> Vec<usize> {
    let dx = 2;
    let base = (family.horizon - 1) * dx;
    (0..dx).map(|i| base + i).collect()
}

pub fn assemble_twotank(family: &TwoTankFamily, instance: &TwoTankInstance) -> BilevelProblem {
    let layer = TwoTankLayer::new(family, instance);
    let dim_z = layer.dim_z();
    let func = SelectCoupling {
        terms: terminal_indices(family).into_iter().map(|i| (i, 1.0)).collect(),
        offset: instance.p.scale(-1.0),
        kinds: vec![ConstraintKind::Equality; 2],
        dim_y: 2,
        dim_z,
    };
    let coupling = CouplingSpec::new(
        Arc::new(func),
        Arc::new(layer),
        UpperSet::Box(BoxSet::uniform(2, family.y_min, family.y_max)),
    );
    BilevelProblem {
        objective: QuadObjective::linear(family.cost.clone(), DenseVector::zeros(dim_z)),
        coupling: Arc::new(coupling),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn samples_respect_ordering() {
        let instances = sample_twotank_instances(500, 9, 1);
        assert_eq!(instances.len(), 500);
        for inst in &instances {
            assert!(inst.p[0] < inst.p[1]);
            assert!(inst.p[0] >= 0.0 && inst.p[1] < 1.0);
        }
        // Determinism.
        let again = sample_twotank_instances(500, 9, 1);
        assert_eq!(instances[499].p, again[499].p);
    }

    #[test]
    fn coupling_violation_arithmetic() {
        let family = TwoTankFamily::default();
        let instance = TwoTankInstance { p: DenseVector::from_vec(vec![0.3, 0.5]) };
        let problem = assemble_twotank(&family, &instance);
        // Hand-build z with x⁽ᴺ⁾ = p + (0.01, −0.02).
        let mut z = DenseVector::zeros(80);
        z[38] = 0.31;
        z[39] = 0.48;
        let nu = problem.coupling.nu_from(&DenseVector::from_vec(vec![0.2, 0.1]), &z);
        assert_abs_diff_eq!(nu[0], 0.01, epsilon = 1e-12);
        assert_abs_diff_eq!(nu[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(nu[2], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(nu[3], 0.02, epsilon = 1e-12);
        assert_abs_diff_eq!(nu.norm2(), 0.02236, epsilon = 1e-4);
    }

    #[test]
    fn degenerate_zero_reference() {
        // p = (0,0): the unforced lower level is already optimal, the
        // coupling holds for any y, and the lower objective is ~0.
        let family = TwoTankFamily::default();
        let instance = TwoTankInstance { p: DenseVector::zeros(2) };
        let problem = assemble_twotank(&family, &instance);
        let y = DenseVector::from_vec(vec![0.2, 0.1]);
        let sol = problem.lower().solve(&y, None).unwrap();
        assert!(sol.objective <= 1e-4, "objective {}", sol.objective);
        let nu = problem.coupling.nu_from(&y, &sol.z);
        assert!(nu.norm2() <= 1e-2, "violation {}", nu.norm2());
    }

    #[test]
    fn layer_solves_and_differentiates() {
        let family = TwoTankFamily::default();
        let instance = TwoTankInstance { p: DenseVector::from_vec(vec![0.3, 0.5]) };
        let problem = assemble_twotank(&family, &instance);
        let y = DenseVector::from_vec(vec![0.2, 0.1]);
        let sol = problem.lower().solve(&y, None).unwrap();
        assert!(sol.kkt_residual <= 1e-6);
        assert!(sol.objective >= 0.0);
        let jac = problem.lower().jacobian(&y, &sol).unwrap();
        assert_eq!((jac.rows(), jac.cols()), (80, 2));
        // Warm start from the same solution converges immediately.
        let warm = problem.lower().solve(&y, Some(&sol)).unwrap();
        assert_abs_diff_eq!(warm.objective, sol.objective, epsilon = 1e-9);
    }
}
