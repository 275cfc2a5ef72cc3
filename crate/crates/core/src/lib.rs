//! Learning to solve parametric bilevel optimization problems with coupling
//! constraints.
//!
//! The crate provides the pieces needed to train neural approximators of
//! bilevel programs whose lower level is an optimization problem solved and
//! differentiated exactly:
//!
//! - [`numerics`]: dense linear algebra, seeded randomness, and a
//!   reverse-mode gradient tape with custom-gradient nodes.
//! - [`qp`]: a dense primal-dual interior-point QP solver with implicit
//!   KKT differentiation, plus differentiable box/polyhedron projections.
//! - [`ocp`]: a trust-region SQP solver for discrete-time optimal control
//!   (single shooting), differentiated through its final QP subproblem.
//! - [`coupling`]: the coupling-constraint violation, its gradient through
//!   the lower-level layer, and the unrolled projected-gradient correction.
//! - [`model`]: MLP predictor, the corrected forward pass, soft loss,
//!   Adam training loop, and evaluation metrics.
//! - [`zoo`]: the three problem families (bilevel QP, two-tank co-design,
//!   HVAC co-design) with seeded generators.
//! - [`baselines`]: an exact active-set enumeration oracle for small
//!   bilevel QPs and a penalized particle-swarm baseline.

pub mod baselines;
pub mod coupling;
pub mod model;
pub mod numerics;
pub mod ocp;
pub mod problem;
pub mod qp;
pub mod zoo;

pub use numerics::{DenseMatrix, DenseVector, GradTape, RngStream};

