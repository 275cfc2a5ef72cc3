//! Nonconvex discrete-time optimal control by trust-region SQP over an
//! Euler-discretized single-shooting rollout, with implicit differentiation
//! through the final QP subproblem.

mod dynamics;
mod jacobian;
mod sqp;

pub use dynamics::{euler_step, Dynamics, OcpError, TwoTankDynamics, EPS_SQ};
pub use jacobian::ocp_jacobian;
pub use sqp::{solve_ocp_sqp, solve_ocp_sqp_warm, OcpProblem, OcpSolution, SqpSettings};
