//! Dense linear algebra, seeded randomness, finite differences, and a
//! reverse-mode gradient tape. Everything downstream builds on this module.

mod fd;
mod linalg;
mod rng;
mod tape;

pub use fd::{finite_diff_grad, FdError};
pub use linalg::{
    cholesky_solve, lu_solve, CholeskyFactors, DenseMatrix, DenseVector, LinalgError, LuFactors,
};
pub use rng::RngStream;
pub use tape::{tape_backward, CustomOp, GradTape, Gradients, NodeId, TapeError};
