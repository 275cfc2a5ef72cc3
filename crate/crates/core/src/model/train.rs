//! One-epoch-at-a-time Adam training of the corrected predictor, and the
//! evaluation pass shared by training, the CLI and the baselines.

use super::{forward_full, MetricsRecord, Model, TrainConfig};
use crate::coupling::{ccv_grad_node, coupling_eval_node, lower_solve_node, project_node};
use crate::numerics::{tape_backward, DenseVector, GradTape, RngStream};
use crate::problem::{BilevelProblem, LayerError};
use rayon::prelude::*;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("epoch {epoch}: {failed}/{total} instances failed the lower level")]
    EpochFailureThreshold { epoch: usize, failed: usize, total: usize },
    #[error("dataset is empty")]
    EmptyDataset,
}

/// Aligned instance parameters and assembled problems.
pub struct InstanceSet {
    pub params: Vec<DenseVector>,
    pub problems: Vec<BilevelProblem>,
}

impl InstanceSet {
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}

pub struct TrainOutput {
    pub model: Model,
    pub best_model: Model,
    pub best_epoch: usize,
    /// Validation metrics per epoch; index 0 is the initial model.
    pub records: Vec<MetricsRecord>,
}

/// Loss and flat parameter gradient for one instance: the Algorithm-1
/// forward pass (predict, project, m correction steps, final lower solve)
/// with the soft loss back-propagated through every stage.
fn instance_grad(
    model: &Model,
    problem: &BilevelProblem,
    p: &DenseVector,
    config: &TrainConfig,
) -> Result<(DenseVector, f64), LayerError> {
    let mut tape = GradTape::new();
    let p_std = model.normalizer.apply(p);
    let (y0, leaves) = super::forward_net_tape(&mut tape, &model.params, &p_std);
    let coupling = &problem.coupling;
    let mut y = project_node(&mut tape, coupling, y0)?;
    let mut warm = None;
    for _ in 0..config.correction.m_train {
        match ccv_grad_node(&mut tape, coupling, y, warm.as_ref()) {
            Ok((g, _viol, sol)) => {
                warm = Some(sol);
                let stepped = tape.scale(g, -config.correction.gamma);
                let moved = tape.add(y, stepped);
                y = project_node(&mut tape, coupling, moved)?;
            }
            // Keep the last valid iterate; the loss is still informative.
            Err(LayerError::LowerLevelFailure(_)) => break,
            Err(e) => return Err(e),
        }
    }
    let (z, _sol) = lower_solve_node(&mut tape, coupling, y, warm.as_ref())?;
    let u = coupling_eval_node(&mut tape, coupling, y, z);
    let nu = tape.relu(u);
    let sq = tape.sq_norm(nu);
    let pen = tape.scale(sq, config.penalty_weight);

    let obj = &problem.objective;
    let mut l_node = tape.dot_const(obj.c.clone(), y);
    if let Some(q) = &obj.q_mat {
        let qn = tape.quad_form_const(q.clone(), y);
        l_node = tape.add(l_node, qn);
    }
    let dz = tape.dot_const(obj.d.clone(), z);
    l_node = tape.add(l_node, dz);
    let mut loss = tape.add(l_node, pen);
    if obj.constant != 0.0 {
        loss = tape.add_const(loss, DenseVector::from_vec(vec![obj.constant]));
    }
    tape.set_root(loss);
    let loss_value = tape.value(loss)[0];

    let grads = tape_backward(&tape).map_err(|e| match e {
        crate::numerics::TapeError::CustomFailed { source, .. } => {
            LayerError::LowerLevelFailure(source.to_string())
        }
        other => LayerError::LowerLevelFailure(other.to_string()),
    })?;

    let mut flat = Vec::with_capacity(model.spec.n_params());
    for (layer, &(w, b)) in model.params.layers.iter().zip(&leaves) {
        flat.extend_from_slice(
            grads.of(w, layer.weight.as_slice().len()).as_slice(),
        );
        flat.extend_from_slice(grads.of(b, layer.bias.len()).as_slice());
    }
    Ok((DenseVector::from_vec(flat), loss_value))
}

struct Adam {
    m: DenseVector,
    v: DenseVector,
    t: u32,
}

impl Adam {
    fn new(dim: usize) -> Self {
        Self { m: DenseVector::zeros(dim), v: DenseVector::zeros(dim), t: 0 }
    }

    fn step(&mut self, theta: &mut DenseVector, grad: &DenseVector, config: &TrainConfig) {
        let a = &config.adam;
        self.t += 1;
        let b1t = 1.0 - a.beta1.powi(self.t as i32);
        let b2t = 1.0 - a.beta2.powi(self.t as i32);
        for i in 0..theta.len() {
            self.m[i] = a.beta1 * self.m[i] + (1.0 - a.beta1) * grad[i];
            self.v[i] = a.beta2 * self.v[i] + (1.0 - a.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            theta[i] -= config.learning_rate * mhat / (vhat.sqrt() + a.eps);
        }
    }
}

/// Validation score for checkpoint selection: mean(L) + λ·E[‖ν‖₂²].
fn validation_score(rec: &MetricsRecord, lambda: f64) -> f64 {
    if rec.n_eval == 0 {
        return f64::INFINITY;
    }
    rec.mean_obj + lambda * (rec.mean_viol * rec.mean_viol + rec.std_viol * rec.std_viol)
}

/// Algorithm-1 training: per-minibatch forward passes with m_train
/// correction steps, soft loss on the corrected pair, backprop through
/// correction, layer, projections and net, Adam updates, and a validation
/// evaluation (m_test steps) after every epoch.
pub fn train(
    model: Model,
    train_set: &InstanceSet,
    val_set: &InstanceSet,
    val_oracle: Option<&[f64]>,
    config: &TrainConfig,
) -> Result<TrainOutput, TrainError> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut model = model;
    let gamma = config.correction.gamma;
    let m_test = config.correction.m_test;
    let first = evaluate(&model, val_set, gamma, m_test, val_oracle, 0);
    let mut best_score = validation_score(&first, config.penalty_weight);
    let mut best_model = model.clone();
    let mut best_epoch = 0;
    let mut records = vec![first];

    let mut theta = model.params.flatten();
    let mut adam = Adam::new(theta.len());
    let n = train_set.len();

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        RngStream::substream(config.seed, 1_000 + epoch as u64).shuffle(&mut order);
        let mut failed = 0;
        for batch in order.chunks(config.batch_size.max(1)) {
            let results: Vec<Result<(DenseVector, f64), LayerError>> = batch
                .par_iter()
                .map(|&i| instance_grad(&model, &train_set.problems[i], &train_set.params[i], config))
                .collect();
            let mut grad_sum = DenseVector::zeros(theta.len());
            let mut successes = 0usize;
            for r in results {
                match r {
                    Ok((g, _)) => {
                        grad_sum.axpy(1.0, &g);
                        successes += 1;
                    }
                    Err(_) => failed += 1,
                }
            }
            if successes == 0 {
                continue;
            }
            let grad = grad_sum.scale(1.0 / successes as f64);
            adam.step(&mut theta, &grad, config);
            model.params.unflatten(&theta);
        }
        if failed * 2 > n {
            return Err(TrainError::EpochFailureThreshold { epoch, failed, total: n });
        }
        let rec = evaluate(&model, val_set, gamma, m_test, val_oracle, epoch);
        let score = validation_score(&rec, config.penalty_weight);
        if score < best_score {
            best_score = score;
            best_model = model.clone();
            best_epoch = epoch;
        }
        records.push(rec);
    }
    Ok(TrainOutput { model, best_model, best_epoch, records })
}

/// Evaluation over an instance set with m_test correction steps: mean/std
/// coupling violation, mean upper objective, relative optimality gap when
/// reference objectives are available, wall-clock inference time, and the
/// constructive-feasibility audit. Failed instances are excluded and
/// counted.
pub fn evaluate(
    model: &Model,
    set: &InstanceSet,
    gamma: f64,
    m_test: usize,
    oracle: Option<&[f64]>,
    epoch: usize,
) -> MetricsRecord {
    struct Row {
        obj: f64,
        viol: f64,
        gap: Option<f64>,
        secs: f64,
        upper_dist: f64,
        lower_resid: f64,
        lower_tol: f64,
    }
    let rows: Vec<Option<Row>> = set
        .params
        .par_iter()
        .zip(&set.problems)
        .enumerate()
        .map(|(i, (p, problem))| {
            let start = Instant::now();
            let fwd = forward_full(model, problem, p, gamma, m_test).ok()?;
            let secs = start.elapsed().as_secs_f64();
            let obj = problem.objective.eval(&fwd.y, &fwd.z);
            let nu = problem.coupling.nu_from(&fwd.y, &fwd.z);
            let gap = oracle.and_then(|ls| {
                let l_star = ls[i];
                (l_star != 0.0).then(|| (obj - l_star).abs() / l_star.abs())
            });
            Some(Row {
                obj,
                viol: nu.norm2(),
                gap,
                secs,
                upper_dist: problem.upper_set().distance(&fwd.y),
                lower_resid: fwd.lower.kkt_residual,
                lower_tol: problem.lower().tolerance(),
            })
        })
        .collect();

    let n_total = rows.len();
    let ok: Vec<Row> = rows.into_iter().flatten().collect();
    let n = ok.len();
    let n_failed = n_total - n;
    let mean = |f: &dyn Fn(&Row) -> f64| -> f64 {
        if n == 0 {
            return f64::NAN;
        }
        ok.iter().map(|r| f(r)).sum::<f64>() / n as f64
    };
    let std = |f: &dyn Fn(&Row) -> f64, m: f64| -> f64 {
        if n == 0 {
            return f64::NAN;
        }
        (ok.iter().map(|r| (f(r) - m).powi(2)).sum::<f64>() / n as f64).sqrt()
    };
    let mean_obj = mean(&|r: &Row| r.obj);
    let mean_viol = mean(&|r: &Row| r.viol);
    let std_viol = std(&|r: &Row| r.viol, mean_viol);
    let gaps: Vec<f64> = ok.iter().filter_map(|r| r.gap).collect();
    let (mean_gap, std_gap) = if oracle.is_some() && !gaps.is_empty() {
        let m = gaps.iter().sum::<f64>() / gaps.len() as f64;
        let s = (gaps.iter().map(|g| (g - m).powi(2)).sum::<f64>() / gaps.len() as f64).sqrt();
        (Some(m), Some(s))
    } else {
        (None, None)
    };
    let n_feas = ok
        .iter()
        .filter(|r| r.upper_dist > 1e-8 || r.lower_resid > r.lower_tol)
        .count();
    MetricsRecord {
        epoch,
        mean_gap,
        std_gap,
        mean_viol,
        std_viol,
        mean_obj,
        sec_per_instance: mean(&|r: &Row| r.secs),
        n_eval: n,
        n_failed,
        max_upper_dist: ok.iter().fold(0.0, |m, r| m.max(r.upper_dist)),
        max_lower_resid: ok.iter().fold(0.0, |m, r| m.max(r.lower_resid)),
        n_feasibility_violations: n_feas,
    }
}
