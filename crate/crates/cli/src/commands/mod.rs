//! Subcommand implementations.

mod eval;
mod generate;
mod oracle;
mod plotdata;
mod pso;
mod train;

pub use eval::cmd_eval;
pub use generate::cmd_generate;
pub use oracle::cmd_oracle;
pub use plotdata::cmd_plotdata;
pub use pso::cmd_pso;
pub use train::cmd_train;

use crate::config::{FamilyConfig, RunConfig};
use anyhow::Context;
use bilevel_core::baselines::solve_bqp_exact;
use bilevel_core::problem::UpperSet;
use bilevel_core::qp::BoxSet;
use bilevel_core::zoo::{
    default_hvac_family, generate_bqp_family, Dataset, Family, Instances, TwoTankFamily,
};
use rayon::prelude::*;

/// Raised when a command exceeds the solver-failure threshold (exit 3).
#[derive(Debug)]
pub struct SolverFailure(pub String);

impl std::fmt::Display for SolverFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "solver failure threshold exceeded: {}", self.0)
    }
}

impl std::error::Error for SolverFailure {}

pub fn build_family(cfg: &FamilyConfig) -> Family {
    match cfg {
        FamilyConfig::Bqp { m, n, r_up, r_lo, seed } => Family::Bqp(generate_bqp_family(
            *m,
            *n,
            r_up.unwrap_or(*m),
            r_lo.unwrap_or(*n),
            *seed,
        )),
        FamilyConfig::TwoTank { seed } => {
            Family::TwoTank(TwoTankFamily { seed: *seed, ..TwoTankFamily::default() })
        }
        FamilyConfig::Hvac { seed } => Family::Hvac(default_hvac_family(*seed)),
    }
}

pub fn load_dataset(config: &RunConfig) -> anyhow::Result<Dataset> {
    let path = config.dataset_path();
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("missing dataset {} (run `generate` first)", path.display()))?;
    let ds: Dataset = serde_json::from_str(&text)?;
    anyhow::ensure!(ds.format == bilevel_core::zoo::DATASET_FORMAT, "not a dataset file");
    Ok(ds)
}

/// Certified objectives for a split; available for the BQP family only.
pub fn oracle_values(family: &Family, split: &Instances) -> Option<Vec<f64>> {
    match (family, split) {
        (Family::Bqp(f), Instances::Bqp(list)) => {
            let values: Vec<Option<f64>> = list
                .par_iter()
                .map(|inst| solve_bqp_exact(f, inst).ok().map(|r| r.objective))
                .collect();
            // Unsolvable instances are excluded by signalling NaN-free data:
            // keep the aligned layout with the mean of nothing impossible.
            if values.iter().any(Option::is_none) {
                // Mark unsolved instances with 0.0 (excluded from gap stats),
                // which downstream treats as ZeroReference.
                Some(values.into_iter().map(|v| v.unwrap_or(0.0)).collect())
            } else {
                Some(values.into_iter().map(Option::unwrap).collect())
            }
        }
        _ => None,
    }
}

pub fn split_of<'a>(ds: &'a Dataset, name: &str) -> anyhow::Result<&'a Instances> {
    match name {
        "train" => Ok(&ds.train),
        "val" => Ok(&ds.val),
        "test" => Ok(&ds.test),
        other => anyhow::bail!("unknown split '{other}' (expected train|val|test)"),
    }
}

/// Finite PSO search box: the family's own box when finite, otherwise the
/// configured caps.
pub fn pso_bounds(family: &Family, config: &RunConfig) -> anyhow::Result<BoxSet> {
    let dim = family.y_dim();
    let sample = family.sample(1, 0, 77);
    let set = family.instance_set(&sample);
    let from_cfg = |lo: Option<f64>, hi: Option<f64>| -> anyhow::Result<BoxSet> {
        match (lo, hi) {
            (Some(l), Some(h)) => Ok(BoxSet::uniform(dim, l, h)),
            _ => anyhow::bail!(
                "the upper set is unbounded; set pso.bound_lo and pso.bound_hi in the config"
            ),
        }
    };
    match set.problems[0].upper_set() {
        UpperSet::Box(b)
            if b.lo.iter().all(|v| v.is_finite()) && b.hi.iter().all(|v| v.is_finite()) =>
        {
            Ok(b.clone())
        }
        UpperSet::Box(b) => {
            // Partially bounded (e.g. Y ≥ 0): intersect with the caps.
            let caps = from_cfg(config.pso.bound_lo, config.pso.bound_hi)?;
            let lo = bilevel_core::numerics::DenseVector::from_vec(
                (0..dim).map(|i| b.lo[i].max(caps.lo[i])).collect(),
            );
            let hi = bilevel_core::numerics::DenseVector::from_vec(
                (0..dim).map(|i| b.hi[i].min(caps.hi[i])).collect(),
            );
            Ok(BoxSet::new(lo, hi))
        }
        _ => from_cfg(config.pso.bound_lo, config.pso.bound_hi),
    }
}
