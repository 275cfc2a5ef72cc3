//! The end-to-end trainable approximator: an MLP predictor composed with m
//! differentiable correction steps, trained against the soft penalty loss
//! with Adam, plus the evaluation metrics.

mod checkpoint;
mod mlp;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, RngState};
pub use mlp::{
    forward_net, forward_net_tape, Activation, LayerParams, MlpSpec, ModelParams, Normalizer,
};
pub use train::{evaluate, train, InstanceSet, TrainError, TrainOutput};

use crate::coupling::{run_correction, CorrectionSettings};
use crate::numerics::DenseVector;
use crate::problem::{BilevelProblem, LayerError, LowerSolution};
use serde::{Deserialize, Serialize};

/// Adam moment parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub penalty_weight: f64,
    pub correction: CorrectionSettings,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub adam: AdamParams,
}

/// Per-evaluation metrics row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    /// Relative optimality gap statistics; present when an oracle was given.
    pub mean_gap: Option<f64>,
    pub std_gap: Option<f64>,
    pub mean_viol: f64,
    pub std_viol: f64,
    pub mean_obj: f64,
    pub sec_per_instance: f64,
    pub n_eval: usize,
    pub n_failed: usize,
    /// Constructive-feasibility audit: worst distance of ŷ from C, worst
    /// lower-level KKT residual relative to the layer tolerance, and the
    /// number of instances violating either bound.
    pub max_upper_dist: f64,
    pub max_lower_resid: f64,
    pub n_feasibility_violations: usize,
}

/// The trained artifact: spec, weights and input normalization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Model {
    pub spec: MlpSpec,
    pub params: ModelParams,
    pub normalizer: Normalizer,
}

impl Model {
    pub fn init(spec: MlpSpec, normalizer: Normalizer, rng: &mut crate::numerics::RngStream) -> Self {
        let params = ModelParams::init(&spec, rng);
        Self { spec, params, normalizer }
    }

    /// He-uniform init with the output-layer bias placed strictly inside
    /// the upper set: predictions that start outside a box are clamped
    /// with zero subgradient, so a fully-outside initialization would
    /// never receive a gradient.
    pub fn init_inside(
        spec: MlpSpec,
        normalizer: Normalizer,
        upper_set: &crate::problem::UpperSet,
        rng: &mut crate::numerics::RngStream,
    ) -> Self {
        let mut model = Self::init(spec, normalizer, rng);
        if let crate::problem::UpperSet::Box(b) = upper_set {
            let last = model.params.layers.len() - 1;
            let bias = &mut model.params.layers[last].bias;
            for i in 0..bias.len() {
                bias[i] = match (b.lo[i].is_finite(), b.hi[i].is_finite()) {
                    (true, true) => 0.5 * (b.lo[i] + b.hi[i]),
                    (true, false) => b.lo[i] + 1.0,
                    (false, true) => b.hi[i] - 1.0,
                    (false, false) => 0.0,
                };
            }
        }
        model
    }

    /// ŷ₀ = N_θ(p) on standardized inputs.
    pub fn predict(&self, p: &DenseVector) -> DenseVector {
        forward_net(&self.params, &self.normalizer.apply(p))
    }
}

/// Soft penalty loss L + λ‖ν‖₂².
pub fn soft_loss(l_value: f64, nu: &DenseVector, lambda: f64) -> f64 {
    debug_assert!(lambda >= 0.0);
    l_value + lambda * nu.dot(nu)
}

/// Output of the corrected forward pass.
pub struct ForwardFull {
    pub y: DenseVector,
    pub z: DenseVector,
    /// ‖ν‖₂ at every correction iterate (length steps + 1).
    pub trace: Vec<f64>,
    pub lower: LowerSolution,
}

/// ŷ = (Π_C ∘ G)^steps(Π_C(N_θ(p))), ẑ = O_p(ŷ), with the per-step ‖ν‖₂
/// trace. Fails when the lower level cannot be solved at the final iterate.
pub fn forward_full(
    model: &Model,
    problem: &BilevelProblem,
    p: &DenseVector,
    gamma: f64,
    steps: usize,
) -> Result<ForwardFull, LayerError> {
    let y0 = model.predict(p);
    let settings = CorrectionSettings { gamma, m_train: steps, m_test: steps };
    let run = run_correction(&problem.coupling, &settings, &y0, steps)?;
    if run.failed {
        return Err(LayerError::LowerLevelFailure(
            "lower level failed during correction".into(),
        ));
    }
    let lower = run.final_sol.expect("present when not failed");
    Ok(ForwardFull { y: run.y, z: lower.z.clone(), trace: run.trace, lower })
}
