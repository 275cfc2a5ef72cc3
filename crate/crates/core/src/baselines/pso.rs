//! Global-best particle swarm baseline on the penalized upper objective
//! L_p(y) + κ‖ν(y)‖₂, with box-native bound handling: positions are
//! clamped to the search box at every iteration.

use crate::coupling::ccv_with_solution;
use crate::numerics::{DenseVector, RngStream};
use crate::problem::{BilevelProblem, LowerSolution};
use crate::qp::BoxSet;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PsoSettings {
    pub c1: f64,
    pub c2: f64,
    pub inertia: f64,
    pub particles: usize,
    pub iterations: usize,
    /// Coupling-violation penalty κ.
    pub kappa: f64,
    /// Finite search box (sampling and clamping).
    pub bounds: BoxSet,
    pub seed: u64,
}

impl PsoSettings {
    /// Default cognitive/social/inertia parameters with the paper's swarm
    /// budget: 128 particles for 200 iterations.
    pub fn with_bounds(bounds: BoxSet, kappa: f64, seed: u64) -> Self {
        Self { c1: 0.5, c2: 0.5, inertia: 0.9, particles: 128, iterations: 200, kappa, bounds, seed }
    }
}

#[derive(Debug, Clone)]
pub struct PsoResult {
    pub y_best: DenseVector,
    /// Upper objective L at the best particle.
    pub objective: f64,
    /// ‖ν‖₂ at the best particle.
    pub violation: f64,
    /// Penalized objective at the best particle.
    pub penalized: f64,
    /// Best penalized objective per iteration (nonincreasing).
    pub trace: Vec<f64>,
    /// Lower-level failures encountered (scored +∞).
    pub failures: usize,
    pub evaluations: usize,
}

struct Evaluated {
    penalized: f64,
    objective: f64,
    violation: f64,
}

/// One penalized-objective evaluation; a failed lower solve scores +∞.
fn evaluate_particle(
    problem: &BilevelProblem,
    kappa: f64,
    y: &DenseVector,
    warm: Option<&LowerSolution>,
) -> (Evaluated, Option<LowerSolution>) {
    match ccv_with_solution(&problem.coupling, y, warm) {
        Ok(eval) => {
            let objective = problem.objective.eval(y, &eval.sol.z);
            let violation = eval.violation_norm();
            (
                Evaluated {
                    penalized: objective + kappa * violation,
                    objective,
                    violation,
                },
                Some(eval.sol),
            )
        }
        Err(_) => (
            Evaluated { penalized: f64::INFINITY, objective: f64::INFINITY, violation: f64::INFINITY },
            None,
        ),
    }
}

/// Canonical global-best PSO: v ← w·v + c₁r₁(pbest − y) + c₂r₂(gbest − y),
/// positions clamped to the box; velocities start at zero and positions
/// uniform in the box. Deterministic per seed; ties go to the lowest
/// particle index.
pub fn pso_solve(problem: &BilevelProblem, settings: &PsoSettings) -> PsoResult {
    let dim = settings.bounds.dim();
    assert!(
        settings.bounds.lo.iter().all(|v| v.is_finite())
            && settings.bounds.hi.iter().all(|v| v.is_finite()),
        "PSO needs a finite search box"
    );
    let mut rng = RngStream::substream(settings.seed, 42);
    let mut positions: Vec<DenseVector> = (0..settings.particles)
        .map(|_| {
            DenseVector::from_vec(
                (0..dim)
                    .map(|d| rng.uniform(settings.bounds.lo[d], settings.bounds.hi[d]))
                    .collect(),
            )
        })
        .collect();
    let mut velocities: Vec<DenseVector> =
        (0..settings.particles).map(|_| DenseVector::zeros(dim)).collect();
    let mut warm: Vec<Option<LowerSolution>> = (0..settings.particles).map(|_| None).collect();

    let mut pbest_pos = positions.clone();
    let mut pbest_val = vec![f64::INFINITY; settings.particles];
    let mut gbest_idx = 0usize;
    let mut gbest = Evaluated { penalized: f64::INFINITY, objective: f64::INFINITY, violation: f64::INFINITY };
    let mut gbest_pos = positions[0].clone();

    let mut trace = Vec::with_capacity(settings.iterations);
    let mut failures = 0usize;
    let mut evaluations = 0usize;

    for _iter in 0..settings.iterations {
        let results: Vec<(Evaluated, Option<LowerSolution>)> = positions
            .par_iter()
            .zip(warm.par_iter())
            .map(|(y, w)| evaluate_particle(problem, settings.kappa, y, w.as_ref()))
            .collect();
        evaluations += settings.particles;
        for (i, (eval, sol)) in results.into_iter().enumerate() {
            if sol.is_none() {
                failures += 1;
            }
            warm[i] = sol;
            if eval.penalized < pbest_val[i] {
                pbest_val[i] = eval.penalized;
                pbest_pos[i] = positions[i].clone();
            }
            if eval.penalized < gbest.penalized
                || (eval.penalized == gbest.penalized && i < gbest_idx)
            {
                gbest = eval;
                gbest_idx = i;
                gbest_pos = positions[i].clone();
            }
        }
        trace.push(gbest.penalized);

        for i in 0..settings.particles {
            for d in 0..dim {
                let r1 = rng.next_f64();
                let r2 = rng.next_f64();
                let v = settings.inertia * velocities[i][d]
                    + settings.c1 * r1 * (pbest_pos[i][d] - positions[i][d])
                    + settings.c2 * r2 * (gbest_pos[d] - positions[i][d]);
                velocities[i][d] = v;
                positions[i][d] =
                    (positions[i][d] + v).max(settings.bounds.lo[d]).min(settings.bounds.hi[d]);
            }
        }
    }

    PsoResult {
        y_best: gbest_pos,
        objective: gbest.objective,
        violation: gbest.violation,
        penalized: gbest.penalized,
        trace,
        failures,
        evaluations,
    }
}
