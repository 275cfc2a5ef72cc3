//! The three problem families: bilevel QPs, two-tank control co-design,
//! and HVAC control co-design, with seeded generators and assembly into
//! [`BilevelProblem`]s.

mod bqp;
mod hvac;
mod twotank;

pub use bqp::{
    assemble_bqp, assemble_bqp_with, bqp_coupling, generate_bqp_family, sample_bqp_instances,
    BqpFamily, BqpInstance,
};
pub use hvac::{
    assemble_hvac, assemble_hvac_with, default_hvac_family, sample_hvac_instances,
    spectral_radius, synth_disturbance, HvacFamily, HvacInstance, HvacLayer, HvacShared,
};
pub use twotank::{
    assemble_twotank, sample_twotank_instances, TwoTankFamily, TwoTankInstance, TwoTankLayer,
};

use crate::model::InstanceSet;
use crate::numerics::DenseVector;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Family data of a dataset file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Family {
    Bqp(BqpFamily),
    TwoTank(TwoTankFamily),
    Hvac(HvacFamily),
}

/// Instance lists of one split.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", content = "items", rename_all = "snake_case")]
pub enum Instances {
    Bqp(Vec<BqpInstance>),
    TwoTank(Vec<TwoTankInstance>),
    Hvac(Vec<HvacInstance>),
}

impl Instances {
    pub fn len(&self) -> usize {
        match self {
            Instances::Bqp(v) => v.len(),
            Instances::TwoTank(v) => v.len(),
            Instances::Hvac(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn truncated(&self, n: usize) -> Instances {
        match self {
            Instances::Bqp(v) => Instances::Bqp(v.iter().take(n).cloned().collect()),
            Instances::TwoTank(v) => Instances::TwoTank(v.iter().take(n).cloned().collect()),
            Instances::Hvac(v) => Instances::Hvac(v.iter().take(n).cloned().collect()),
        }
    }
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::Bqp(_) => "bqp",
            Family::TwoTank(_) => "two_tank",
            Family::Hvac(_) => "hvac",
        }
    }

    /// Dimension of the instance parameter vector p.
    pub fn param_dim(&self) -> usize {
        match self {
            Family::Bqp(f) => f.m + f.n,
            Family::TwoTank(_) => 2,
            Family::Hvac(f) => 2 * f.horizon * f.n_zones,
        }
    }

    /// Dimension of the upper-level variable y.
    pub fn y_dim(&self) -> usize {
        match self {
            Family::Bqp(f) => f.m,
            Family::TwoTank(_) => 2,
            Family::Hvac(f) => f.n_states * f.n_zones,
        }
    }

    pub fn sample(&self, count: usize, seed: u64, stream: u64) -> Instances {
        match self {
            Family::Bqp(f) => Instances::Bqp(sample_bqp_instances(f, count, seed, stream)),
            Family::TwoTank(_) => Instances::TwoTank(sample_twotank_instances(count, seed, stream)),
            Family::Hvac(f) => Instances::Hvac(sample_hvac_instances(f, count, seed, stream)),
        }
    }

    /// Assemble an aligned instance set (shared family data held in Arcs).
    pub fn instance_set(&self, instances: &Instances) -> InstanceSet {
        match (self, instances) {
            (Family::Bqp(f), Instances::Bqp(list)) => {
                let coupling = bqp_coupling(f);
                InstanceSet {
                    params: list.iter().map(BqpInstance::param_vec).collect(),
                    problems: list.iter().map(|i| assemble_bqp_with(f, &coupling, i)).collect(),
                }
            }
            (Family::TwoTank(f), Instances::TwoTank(list)) => InstanceSet {
                params: list.iter().map(TwoTankInstance::param_vec).collect(),
                problems: list.iter().map(|i| assemble_twotank(f, i)).collect(),
            },
            (Family::Hvac(f), Instances::Hvac(list)) => {
                let shared = Arc::new(HvacShared::new(f.clone()));
                InstanceSet {
                    params: list.iter().map(|i| i.param_vec(f.bound_gap)).collect(),
                    problems: list.iter().map(|i| assemble_hvac_with(&shared, i)).collect(),
                }
            }
            _ => panic!("family/instances kind mismatch"),
        }
    }
}

/// A generated dataset: family data plus train/validation/test splits and
/// the seeds that produced them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub format: String,
    pub version: u32,
    pub family: Family,
    pub seed: u64,
    pub train: Instances,
    pub val: Instances,
    pub test: Instances,
}

pub const DATASET_FORMAT: &str = "bilevel-dataset";
pub const DATASET_VERSION: u32 = 1;

impl Dataset {
    pub fn generate(family: Family, n_train: usize, n_val: usize, n_test: usize, seed: u64) -> Self {
        let train = family.sample(n_train, seed, 1);
        let val = family.sample(n_val, seed, 2);
        let test = family.sample(n_test, seed, 3);
        Self {
            format: DATASET_FORMAT.to_string(),
            version: DATASET_VERSION,
            family,
            seed,
            train,
            val,
            test,
        }
    }

    /// Per-instance raw parameter vectors of a split.
    pub fn params_of(&self, split: &Instances) -> Vec<DenseVector> {
        match (&self.family, split) {
            (Family::Bqp(_), Instances::Bqp(list)) => {
                list.iter().map(BqpInstance::param_vec).collect()
            }
            (Family::TwoTank(_), Instances::TwoTank(list)) => {
                list.iter().map(TwoTankInstance::param_vec).collect()
            }
            (Family::Hvac(f), Instances::Hvac(list)) => {
                list.iter().map(|i| i.param_vec(f.bound_gap)).collect()
            }
            _ => panic!("family/instances kind mismatch"),
        }
    }
}
