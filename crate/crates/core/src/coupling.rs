//! Coupling constraints between the upper and lower level, the Coupling
//! Constraint Violation ν(y) = ReLU(U(y, O_p(y))), the gradient of ‖ν‖²
//! through the lower-level layer, and the m-step differentiable
//! projected-gradient correction routine
//!
//! ```text
//!   y ← Π_C( y − γ ∇‖ν(y)‖² )
//! ```
//!
//! Equality rows are expanded internally to two-sided inequalities [g; −g]
//! before the ReLU, so ‖ν‖₂ equals the equality residual norm.

use crate::numerics::{CustomOp, DenseVector, GradTape, NodeId, TapeError};
use crate::problem::{LayerError, LowerLayer, LowerSolution, UpperSet};
use crate::qp::{projection_qp, qp_jacobian, solve_qp, ParamBlock, DEFAULT_ACT_TOL};
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ConstraintKind {
    /// Row value ≤ 0 is feasible.
    Inequality,
    /// Row value = 0 is feasible.
    Equality,
}

/// The coupling function U(y, z), with transpose-Jacobian applications so
/// large selection-style couplings never materialize dense matrices.
pub trait CouplingFn: Send + Sync {
    fn rows(&self) -> usize;
    fn kinds(&self) -> &[ConstraintKind];
    fn eval(&self, y: &DenseVector, z: &DenseVector) -> DenseVector;
    /// (∂U/∂y)ᵀ w
    fn apply_jac_y_t(&self, y: &DenseVector, z: &DenseVector, w: &DenseVector) -> DenseVector;
    /// (∂U/∂z)ᵀ w
    fn apply_jac_z_t(&self, y: &DenseVector, z: &DenseVector, w: &DenseVector) -> DenseVector;
}

/// U(y, z) = W_y y + W_z z + offset.
pub struct AffineCoupling {
    pub wy: Option<crate::numerics::DenseMatrix>,
    pub wz: Option<crate::numerics::DenseMatrix>,
    pub offset: DenseVector,
    pub kinds: Vec<ConstraintKind>,
    pub dim_y: usize,
    pub dim_z: usize,
}

impl CouplingFn for AffineCoupling {
    fn rows(&self) -> usize {
        self.offset.len()
    }

    fn kinds(&self) -> &[ConstraintKind] {
        &self.kinds
    }

    fn eval(&self, y: &DenseVector, z: &DenseVector) -> DenseVector {
        let mut u = self.offset.clone();
        if let Some(wy) = &self.wy {
            u.axpy(1.0, &wy.matvec(y));
        }
        if let Some(wz) = &self.wz {
            u.axpy(1.0, &wz.matvec(z));
        }
        u
    }

    fn apply_jac_y_t(&self, _y: &DenseVector, _z: &DenseVector, w: &DenseVector) -> DenseVector {
        match &self.wy {
            Some(wy) => wy.matvec_transpose(w),
            None => DenseVector::zeros(self.dim_y),
        }
    }

    fn apply_jac_z_t(&self, _y: &DenseVector, _z: &DenseVector, w: &DenseVector) -> DenseVector {
        match &self.wz {
            Some(wz) => wz.matvec_transpose(w),
            None => DenseVector::zeros(self.dim_z),
        }
    }
}

/// Rows of the form sign·z[index] + offset, without a dense matrix.
pub struct SelectCoupling {
    /// (z index, sign) per row.
    pub terms: Vec<(usize, f64)>,
    pub offset: DenseVector,
    pub kinds: Vec<ConstraintKind>,
    pub dim_y: usize,
    pub dim_z: usize,
}

impl CouplingFn for SelectCoupling {
    fn rows(&self) -> usize {
        self.terms.len()
    }

    fn kinds(&self) -> &[ConstraintKind] {
        &self.kinds
    }

    fn eval(&self, _y: &DenseVector, z: &DenseVector) -> DenseVector {
        DenseVector::from_vec(
            self.terms
                .iter()
                .enumerate()
                .map(|(r, &(i, s))| s * z[i] + self.offset[r])
                .collect(),
        )
    }

    fn apply_jac_y_t(&self, _y: &DenseVector, _z: &DenseVector, _w: &DenseVector) -> DenseVector {
        DenseVector::zeros(self.dim_y)
    }

    fn apply_jac_z_t(&self, _y: &DenseVector, _z: &DenseVector, w: &DenseVector) -> DenseVector {
        let mut out = DenseVector::zeros(self.dim_z);
        for (r, &(i, s)) in self.terms.iter().enumerate() {
            out[i] += s * w[r];
        }
        out
    }
}

/// Step size γ and the train/test correction step counts.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct CorrectionSettings {
    pub gamma: f64,
    pub m_train: usize,
    pub m_test: usize,
}

impl CorrectionSettings {
    pub fn new(gamma: f64, m_train: usize, m_test: usize) -> Self {
        assert!(gamma >= 0.0);
        Self { gamma, m_train, m_test }
    }
}

/// Coupling constraints plus the handles the correction routine needs: the
/// differentiable lower-level layer and the upper-set projection.
pub struct CouplingSpec {
    pub func: Arc<dyn CouplingFn>,
    pub lower: Arc<dyn LowerLayer>,
    pub upper_set: UpperSet,
    /// Expanded row map: (base row, sign). Equality rows contribute a
    /// second, negated copy after all base rows.
    expansion: Vec<(usize, f64)>,
}

impl CouplingSpec {
    pub fn new(func: Arc<dyn CouplingFn>, lower: Arc<dyn LowerLayer>, upper_set: UpperSet) -> Self {
        let mut expansion: Vec<(usize, f64)> = (0..func.rows()).map(|r| (r, 1.0)).collect();
        for (r, kind) in func.kinds().iter().enumerate() {
            if *kind == ConstraintKind::Equality {
                expansion.push((r, -1.0));
            }
        }
        Self { func, lower, upper_set, expansion }
    }

    pub fn expanded_rows(&self) -> usize {
        self.expansion.len()
    }

    /// ν from an already-computed (y, z) pair.
    pub fn nu_from(&self, y: &DenseVector, z: &DenseVector) -> DenseVector {
        let u = self.func.eval(y, z);
        DenseVector::from_vec(
            self.expansion.iter().map(|&(r, s)| (s * u[r]).max(0.0)).collect(),
        )
    }

    /// Fold an expanded-row cotangent back onto base rows.
    fn fold_expanded(&self, w_exp: &DenseVector) -> DenseVector {
        let mut w = DenseVector::zeros(self.func.rows());
        for (k, &(r, s)) in self.expansion.iter().enumerate() {
            w[r] += s * w_exp[k];
        }
        w
    }
}

/// ν(y) and the lower-level solution it was computed from.
pub struct CcvEval {
    pub nu: DenseVector,
    pub sol: LowerSolution,
}

impl CcvEval {
    pub fn violation_norm(&self) -> f64 {
        self.nu.norm2()
    }
}

/// Coupling Constraint Violation ν(y) = ReLU(U(y, O_p(y))).
pub fn ccv(spec: &CouplingSpec, y: &DenseVector) -> Result<DenseVector, LayerError> {
    ccv_with_solution(spec, y, None).map(|e| e.nu)
}

pub fn ccv_with_solution(
    spec: &CouplingSpec,
    y: &DenseVector,
    warm: Option<&LowerSolution>,
) -> Result<CcvEval, LayerError> {
    let sol = spec.lower.solve(y, warm)?;
    let nu = spec.nu_from(y, &sol.z);
    Ok(CcvEval { nu, sol })
}

/// ∇_y ‖ν(y)‖² = 2 (∂U/∂y + ∂U/∂z · ∂O_p/∂y)ᵀ (mask ∘ ν), chained through
/// the lower-level layer's implicit Jacobian.
pub fn ccv_grad(spec: &CouplingSpec, y: &DenseVector) -> Result<DenseVector, LayerError> {
    ccv_grad_with(spec, y, None).map(|(g, _)| g)
}

pub fn ccv_grad_with(
    spec: &CouplingSpec,
    y: &DenseVector,
    warm: Option<&LowerSolution>,
) -> Result<(DenseVector, CcvEval), LayerError> {
    let eval = ccv_with_solution(spec, y, warm)?;
    if eval.nu.iter().all(|v| *v == 0.0) {
        // Strictly feasible: the ReLU dead zone kills the gradient.
        return Ok((DenseVector::zeros(y.len()), eval));
    }
    // w_exp = 2·ν (the ReLU mask is implicit: ν is zero off the active rows).
    let w_exp = eval.nu.scale(2.0);
    let w = spec.fold_expanded(&w_exp);
    let mut grad = spec.func.apply_jac_y_t(y, &eval.sol.z, &w);
    let wz = spec.func.apply_jac_z_t(y, &eval.sol.z, &w);
    if wz.iter().any(|v| *v != 0.0) {
        let jac = spec.lower.jacobian(y, &eval.sol)?;
        grad.axpy(1.0, &jac.matvec_transpose(&wz));
    }
    Ok((grad, eval))
}

/// One correction step: y′ = Π_C(y − γ ∇‖ν(y)‖²).
pub fn correction_step(
    spec: &CouplingSpec,
    settings: &CorrectionSettings,
    y: &DenseVector,
) -> Result<DenseVector, LayerError> {
    let (grad, _) = ccv_grad_with(spec, y, None)?;
    let mut stepped = y.clone();
    stepped.axpy(-settings.gamma, &grad);
    spec.upper_set.project(&stepped)
}

/// Result of an m-step correction run.
pub struct CorrectionRun {
    pub y: DenseVector,
    /// ‖ν‖₂ at each iterate, including the initial and final points.
    pub trace: Vec<f64>,
    /// Lower-level solution at the final iterate.
    pub final_sol: Option<LowerSolution>,
    /// True when a lower-level failure cut the run short; `y` is the last
    /// valid iterate.
    pub failed: bool,
}

/// Runs `steps` correction steps from Π_C(y0), recording the per-step ‖ν‖₂
/// trace. The initial projection makes the first gradient evaluation happen
/// at a feasible point.
pub fn run_correction(
    spec: &CouplingSpec,
    settings: &CorrectionSettings,
    y0: &DenseVector,
    steps: usize,
) -> Result<CorrectionRun, LayerError> {
    let mut y = spec.upper_set.project(y0)?;
    let mut trace = Vec::with_capacity(steps + 1);
    let mut warm: Option<LowerSolution> = None;
    for _ in 0..steps {
        match ccv_grad_with(spec, &y, warm.as_ref()) {
            Ok((grad, eval)) => {
                trace.push(eval.violation_norm());
                warm = Some(eval.sol);
                let mut stepped = y.clone();
                stepped.axpy(-settings.gamma, &grad);
                y = spec.upper_set.project(&stepped)?;
            }
            Err(LayerError::LowerLevelFailure(_)) => {
                return Ok(CorrectionRun { y, trace, final_sol: None, failed: true });
            }
            Err(e) => return Err(e),
        }
    }
    match ccv_with_solution(spec, &y, warm.as_ref()) {
        Ok(eval) => {
            trace.push(eval.violation_norm());
            Ok(CorrectionRun { y, trace, final_sol: Some(eval.sol), failed: false })
        }
        Err(LayerError::LowerLevelFailure(_)) => {
            Ok(CorrectionRun { y, trace, final_sol: None, failed: true })
        }
        Err(e) => Err(e),
    }
}

// ---------------------------------------------------------------------------
// Tape nodes: the pieces of the correction that need custom gradients.
// ---------------------------------------------------------------------------

/// z = O_p(y): backward injects the layer's implicit Jacobian.
struct LowerSolveOp {
    spec: Arc<CouplingSpec>,
    sol: LowerSolution,
}

impl CustomOp for LowerSolveOp {
    fn name(&self) -> &'static str {
        "lower_solve"
    }

    fn backward(
        &self,
        out_grad: &DenseVector,
        inputs: &[&DenseVector],
    ) -> Result<Vec<DenseVector>, TapeError> {
        let y = inputs[0];
        let jac = self
            .spec
            .lower
            .jacobian(y, &self.sol)
            .map_err(|e| TapeError::CustomFailed { op: "lower_solve", source: Box::new(e) })?;
        Ok(vec![jac.matvec_transpose(out_grad)])
    }
}

/// g = ∇‖ν(y)‖² as a tape node. Backward is a Hessian-vector product by
/// central differences of the gradient itself (step 1e-6), realizing the
/// gradient-of-gradient path of the correction step.
struct CcvGradOp {
    spec: Arc<CouplingSpec>,
    sol: LowerSolution,
}

impl CustomOp for CcvGradOp {
    fn name(&self) -> &'static str {
        "ccv_grad"
    }

    fn backward(
        &self,
        out_grad: &DenseVector,
        inputs: &[&DenseVector],
    ) -> Result<Vec<DenseVector>, TapeError> {
        let y = inputs[0];
        let vnorm = out_grad.norm_inf();
        if vnorm == 0.0 {
            return Ok(vec![DenseVector::zeros(y.len())]);
        }
        let dir = out_grad.scale(1.0 / vnorm);
        let eps = 1e-6 * (1.0 + y.norm_inf());
        let mut yp = y.clone();
        yp.axpy(eps, &dir);
        let mut ym = y.clone();
        ym.axpy(-eps, &dir);
        let to_tape = |e: LayerError| TapeError::CustomFailed { op: "ccv_grad", source: Box::new(e) };
        let (gp, _) = ccv_grad_with(&self.spec, &yp, Some(&self.sol)).map_err(to_tape)?;
        let (gm, _) = ccv_grad_with(&self.spec, &ym, Some(&self.sol)).map_err(to_tape)?;
        // H v ≈ ‖v‖ · (g(y+εv̂) − g(y−εv̂)) / (2ε); the Hessian of ‖ν‖² is
        // symmetric wherever it exists, so Hᵀv = Hv.
        let mut hv = gp.sub(&gm);
        hv = hv.scale(vnorm / (2.0 * eps));
        Ok(vec![hv])
    }
}

/// Polyhedron projection as a tape node, differentiated through the
/// projection QP's KKT system.
struct ProjectPolyOp {
    f_mat: crate::numerics::DenseMatrix,
    rhs: DenseVector,
    qp_sol: crate::qp::QpSolution,
}

impl CustomOp for ProjectPolyOp {
    fn name(&self) -> &'static str {
        "project_polyhedron"
    }

    fn backward(
        &self,
        out_grad: &DenseVector,
        inputs: &[&DenseVector],
    ) -> Result<Vec<DenseVector>, TapeError> {
        let y = inputs[0];
        let qp = projection_qp(y, &self.f_mat, &self.rhs);
        let jac = qp_jacobian(&qp, &self.qp_sol, &[ParamBlock::LinCost], DEFAULT_ACT_TOL)
            .map_err(|e| TapeError::CustomFailed { op: "project_polyhedron", source: Box::new(e) })?;
        // w = argmin ½‖w−y‖²  ⇒  e = −y  ⇒  dw/dy = −dz/de.
        let dz_de = jac.dz_dlin.expect("requested block");
        Ok(vec![dz_de.matvec_transpose(out_grad).scale(-1.0)])
    }
}

/// Record Π_C(y) on the tape.
pub fn project_node(
    tape: &mut GradTape,
    spec: &Arc<CouplingSpec>,
    y: NodeId,
) -> Result<NodeId, LayerError> {
    match &spec.upper_set {
        UpperSet::All => Ok(y),
        UpperSet::Box(b) => Ok(tape.clamp_box(y, b.lo.clone(), b.hi.clone())),
        UpperSet::Polyhedron { f_mat, rhs } => {
            let yv = tape.value(y).clone();
            let qp = projection_qp(&yv, f_mat, rhs);
            let qp_sol =
                solve_qp(&qp, crate::qp::DEFAULT_TOL, crate::qp::DEFAULT_MAX_ITER).map_err(LayerError::from)?;
            let value = qp_sol.z.clone();
            let op = ProjectPolyOp { f_mat: f_mat.clone(), rhs: rhs.clone(), qp_sol };
            Ok(tape.custom(Box::new(op), vec![y], value))
        }
    }
}

/// Record z = O_p(y) on the tape.
pub fn lower_solve_node(
    tape: &mut GradTape,
    spec: &Arc<CouplingSpec>,
    y: NodeId,
    warm: Option<&LowerSolution>,
) -> Result<(NodeId, LowerSolution), LayerError> {
    let yv = tape.value(y).clone();
    let sol = spec.lower.solve(&yv, warm)?;
    let node = tape.custom(
        Box::new(LowerSolveOp { spec: Arc::clone(spec), sol: sol.clone() }),
        vec![y],
        sol.z.clone(),
    );
    Ok((node, sol))
}

/// Record g = ∇‖ν(y)‖² on the tape; returns the node and ‖ν‖₂ at y.
pub fn ccv_grad_node(
    tape: &mut GradTape,
    spec: &Arc<CouplingSpec>,
    y: NodeId,
    warm: Option<&LowerSolution>,
) -> Result<(NodeId, f64, LowerSolution), LayerError> {
    let yv = tape.value(y).clone();
    let (grad, eval) = ccv_grad_with(spec, &yv, warm)?;
    let viol = eval.violation_norm();
    let node = tape.custom(
        Box::new(CcvGradOp { spec: Arc::clone(spec), sol: eval.sol.clone() }),
        vec![y],
        grad,
    );
    Ok((node, viol, eval.sol))
}

/// Record the U(y, z) evaluation (expanded rows) on the tape via its exact
/// affine transposes.
struct CouplingEvalOp {
    spec: Arc<CouplingSpec>,
}

impl CustomOp for CouplingEvalOp {
    fn name(&self) -> &'static str {
        "coupling_eval"
    }

    fn backward(
        &self,
        out_grad: &DenseVector,
        inputs: &[&DenseVector],
    ) -> Result<Vec<DenseVector>, TapeError> {
        let (y, z) = (inputs[0], inputs[1]);
        let w = self.spec.fold_expanded(out_grad);
        Ok(vec![
            self.spec.func.apply_jac_y_t(y, z, &w),
            self.spec.func.apply_jac_z_t(y, z, &w),
        ])
    }
}

/// Expanded U(y, z) node (pre-ReLU).
pub fn coupling_eval_node(
    tape: &mut GradTape,
    spec: &Arc<CouplingSpec>,
    y: NodeId,
    z: NodeId,
) -> NodeId {
    let u = spec.func.eval(tape.value(y), tape.value(z));
    let expanded =
        DenseVector::from_vec(spec.expansion.iter().map(|&(r, s)| s * u[r]).collect());
    tape.custom(Box::new(CouplingEvalOp { spec: Arc::clone(spec) }), vec![y, z], expanded)
}
