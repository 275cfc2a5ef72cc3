//! Convex quadratic programming with implicit KKT differentiation, plus
//! differentiable projections (closed-form box and QP-backed polyhedron).

mod jacobian;
mod project;
mod solver;

pub use jacobian::{qp_directional_jacobian, qp_jacobian, ParamBlock, QpDirection, QpJacobian};
pub use project::{project_box, project_polyhedron, projection_qp, BoxSet};
pub use solver::{kkt_residual, polish_qp, solve_qp, QpError, QpProblem, QpSolution, QpStatus};

/// Default KKT tolerance: two orders tighter than training-level tolerances
/// so layer error never dominates.
pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 100;
/// Strict-complementarity threshold for active-set identification.
pub const DEFAULT_ACT_TOL: f64 = 1e-6;
