//! The bilevel problem abstraction: a quadratic upper objective, an upper
//! feasible set with a differentiable projection, a differentiable
//! lower-level solver layer, and coupling constraints binding the two
//! levels.

use crate::numerics::{DenseMatrix, DenseVector};
use crate::ocp::OcpError;
use crate::qp::{
    polish_qp, project_box, project_polyhedron, qp_directional_jacobian, solve_qp, BoxSet,
    QpDirection, QpError, QpProblem, QpSolution, QpStatus, DEFAULT_ACT_TOL, DEFAULT_MAX_ITER,
    DEFAULT_TOL,
};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LayerError {
    #[error("lower-level solve failed: {0}")]
    LowerLevelFailure(String),
    #[error("degenerate active set in lower-level differentiation: {0}")]
    DegenerateActiveSet(String),
}

impl From<QpError> for LayerError {
    fn from(e: QpError) -> Self {
        match e {
            QpError::DegenerateActiveSet(msg) => LayerError::DegenerateActiveSet(msg),
            other => LayerError::LowerLevelFailure(other.to_string()),
        }
    }
}

impl From<OcpError> for LayerError {
    fn from(e: OcpError) -> Self {
        match e {
            OcpError::DegenerateActiveSet(msg) => LayerError::DegenerateActiveSet(msg),
            other => LayerError::LowerLevelFailure(other.to_string()),
        }
    }
}

/// Solver-specific payload of a lower-level solution, kept for warm starts
/// and diagnostics.
#[derive(Debug, Clone)]
pub enum LowerDetail {
    Qp(QpSolution),
    Ocp(crate::ocp::OcpSolution),
}

/// Lower-level optimizer z = O_p(y) with certificates.
#[derive(Debug, Clone)]
pub struct LowerSolution {
    pub z: DenseVector,
    pub objective: f64,
    pub kkt_residual: f64,
    pub detail: LowerDetail,
}

/// A differentiable lower-level optimization layer: the map y ↦ z*(y) and
/// its Jacobian obtained by implicit differentiation of optimality
/// conditions.
pub trait LowerLayer: Send + Sync {
    fn dim_y(&self) -> usize;
    fn dim_z(&self) -> usize;
    /// Tolerance the layer certifies its KKT residual against.
    fn tolerance(&self) -> f64;
    fn solve(&self, y: &DenseVector, warm: Option<&LowerSolution>) -> Result<LowerSolution, LayerError>;
    /// ∂z*/∂y as a (dim_z × dim_y) matrix.
    fn jacobian(&self, y: &DenseVector, sol: &LowerSolution) -> Result<DenseMatrix, LayerError>;
}

/// Upper-level feasible set C with its Euclidean projection.
#[derive(Debug, Clone)]
pub enum UpperSet {
    /// All of ℝⁿ: the projection is the identity.
    All,
    Box(BoxSet),
    Polyhedron { f_mat: DenseMatrix, rhs: DenseVector },
}

impl UpperSet {
    pub fn project(&self, y: &DenseVector) -> Result<DenseVector, LayerError> {
        match self {
            UpperSet::All => Ok(y.clone()),
            UpperSet::Box(b) => Ok(project_box(y, b)),
            UpperSet::Polyhedron { f_mat, rhs } => {
                project_polyhedron(y, f_mat, rhs).map_err(LayerError::from)
            }
        }
    }

    /// Worst constraint violation of y (0 when inside).
    pub fn distance(&self, y: &DenseVector) -> f64 {
        match self {
            UpperSet::All => 0.0,
            UpperSet::Box(b) => b.distance_inf(y),
            UpperSet::Polyhedron { f_mat, rhs } => {
                let fy = f_mat.matvec(y);
                (0..rhs.len()).fold(0.0_f64, |m, i| m.max(fy[i] - rhs[i]))
            }
        }
    }
}

/// Upper objective L(y, z) = ½yᵀQy + cᵀy + dᵀz + q.
#[derive(Debug, Clone)]
pub struct QuadObjective {
    pub q_mat: Option<DenseMatrix>,
    pub c: DenseVector,
    pub d: DenseVector,
    pub constant: f64,
}

impl QuadObjective {
    pub fn linear(c: DenseVector, d: DenseVector) -> Self {
        Self { q_mat: None, c, d, constant: 0.0 }
    }

    pub fn eval(&self, y: &DenseVector, z: &DenseVector) -> f64 {
        let quad = match &self.q_mat {
            Some(q) => 0.5 * y.dot(&q.matvec(y)),
            None => 0.0,
        };
        quad + self.c.dot(y) + self.d.dot(z) + self.constant
    }
}

/// A fully assembled parametric bilevel problem instance.
pub struct BilevelProblem {
    pub objective: QuadObjective,
    pub coupling: std::sync::Arc<crate::coupling::CouplingSpec>,
}

impl BilevelProblem {
    pub fn lower(&self) -> &Arc<dyn LowerLayer> {
        &self.coupling.lower
    }

    pub fn upper_set(&self) -> &UpperSet {
        &self.coupling.upper_set
    }

    pub fn dim_y(&self) -> usize {
        self.coupling.lower.dim_y()
    }
}

/// A QP-backed lower level whose data depend affinely on y:
///
/// ```text
///   lin(y)  = lin₀ + E_y y
///   rhs(y)  = rhs₀ + H_y y
///   F(y)    = F₀ + Σₖ yₖ F_y[k]
///   beq(y)  = beq₀ + B_y y
/// ```
pub struct ParamQp {
    pub base: QpProblem,
    pub lin_y: Option<DenseMatrix>,
    pub rhs_y: Option<DenseMatrix>,
    pub mat_y: Option<Arc<Vec<DenseMatrix>>>,
    pub eq_rhs_y: Option<DenseMatrix>,
    pub dim_y: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub act_tol: f64,
    /// Active-set polish after the interior-point solve (small problems).
    pub polish: bool,
    /// Constant offset added to the reported objective (terms that do not
    /// depend on z, e.g. fᵀy + g in the bilevel-QP lower level).
    pub objective_offset: Box<dyn Fn(&DenseVector) -> f64 + Send + Sync>,
}

impl ParamQp {
    pub fn new(base: QpProblem, dim_y: usize) -> Self {
        Self {
            base,
            lin_y: None,
            rhs_y: None,
            mat_y: None,
            eq_rhs_y: None,
            dim_y,
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            act_tol: DEFAULT_ACT_TOL,
            polish: true,
            objective_offset: Box::new(|_| 0.0),
        }
    }

    pub fn assemble(&self, y: &DenseVector) -> QpProblem {
        let mut qp = self.base.clone();
        if let Some(e) = &self.lin_y {
            qp.lin.axpy(1.0, &e.matvec(y));
        }
        if let Some(h) = &self.rhs_y {
            qp.ineq_rhs.axpy(1.0, &h.matvec(y));
        }
        if let Some(mats) = &self.mat_y {
            for (k, m) in mats.iter().enumerate() {
                if y[k] != 0.0 {
                    qp.ineq_mat = qp.ineq_mat.add(&m.scale(y[k]));
                }
            }
        }
        if let (Some(b), Some(rhs)) = (&self.eq_rhs_y, &mut qp.eq_rhs) {
            rhs.axpy(1.0, &b.matvec(y));
        }
        qp
    }
}

impl LowerLayer for ParamQp {
    fn dim_y(&self) -> usize {
        self.dim_y
    }

    fn dim_z(&self) -> usize {
        self.base.dim()
    }

    fn tolerance(&self) -> f64 {
        self.tol
    }

    fn solve(&self, y: &DenseVector, _warm: Option<&LowerSolution>) -> Result<LowerSolution, LayerError> {
        let qp = self.assemble(y);
        let sol = solve_qp(&qp, self.tol, self.max_iter)?;
        let sol = if self.polish { polish_qp(&qp, &sol) } else { sol };
        if sol.status == QpStatus::MaxIter && sol.kkt_residual > self.tol * 1e3 {
            return Err(LayerError::LowerLevelFailure(format!(
                "interior point stalled at residual {:.3e}",
                sol.kkt_residual
            )));
        }
        Ok(LowerSolution {
            objective: qp.objective(&sol.z) + (self.objective_offset)(y),
            kkt_residual: sol.kkt_residual,
            z: sol.z.clone(),
            detail: LowerDetail::Qp(sol),
        })
    }

    fn jacobian(&self, y: &DenseVector, sol: &LowerSolution) -> Result<DenseMatrix, LayerError> {
        let LowerDetail::Qp(qp_sol) = &sol.detail else {
            return Err(LayerError::LowerLevelFailure("wrong solution detail".into()));
        };
        let qp = self.assemble(y);
        // One structured direction per design coordinate.
        let lin_cols: Vec<Option<DenseVector>> = (0..self.dim_y)
            .map(|k| self.lin_y.as_ref().map(|m| column(m, k)))
            .collect();
        let rhs_cols: Vec<Option<DenseVector>> = (0..self.dim_y)
            .map(|k| self.rhs_y.as_ref().map(|m| column(m, k)))
            .collect();
        let eq_cols: Vec<Option<DenseVector>> = (0..self.dim_y)
            .map(|k| self.eq_rhs_y.as_ref().map(|m| column(m, k)))
            .collect();
        let dirs: Vec<QpDirection<'_>> = (0..self.dim_y)
            .map(|k| QpDirection {
                d_lin: lin_cols[k].as_ref(),
                d_ineq_rhs: rhs_cols[k].as_ref(),
                d_ineq_mat: self.mat_y.as_ref().map(|m| &m[k]),
                d_eq_rhs: eq_cols[k].as_ref(),
                ..QpDirection::default()
            })
            .collect();
        qp_directional_jacobian(&qp, qp_sol, &dirs, self.act_tol).map_err(LayerError::from)
    }
}

fn column(m: &DenseMatrix, k: usize) -> DenseVector {
    DenseVector::from_vec((0..m.rows()).map(|r| m.get(r, k)).collect())
}
