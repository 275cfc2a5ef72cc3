//! Run configuration: a single TOML document drives every subcommand.
//! Presets mirroring the experiment hyperparameter tables ship compiled in
//! and as files under `presets/`.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Worker threads; 0 means all available cores.
    #[serde(default)]
    pub workers: usize,
    pub out_dir: PathBuf,
    pub family: FamilyConfig,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub pso: PsoSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub oracle: OracleSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FamilyConfig {
    Bqp {
        m: usize,
        n: usize,
        #[serde(default)]
        r_up: Option<usize>,
        #[serde(default)]
        r_lo: Option<usize>,
        seed: u64,
    },
    TwoTank {
        seed: u64,
    },
    Hvac {
        seed: u64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Total linear layers (the "k-layer network" convention).
    pub layers: usize,
    pub hidden_width: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { layers: 5, hidden_width: 200, seed: 7 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub penalty_weight: f64,
    /// Correction step size γ.
    pub gamma: f64,
    pub m_train: usize,
    pub m_test: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            penalty_weight: 1e2,
            gamma: 1e-4,
            m_train: 10,
            m_test: 20,
            epochs: 75,
            batch_size: 64,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PsoSection {
    pub kappa: f64,
    pub particles: usize,
    pub iterations: usize,
    /// Number of test instances the baseline runs on (0 = all).
    pub instances: usize,
    pub seed: u64,
    /// Search box for families whose upper set is unbounded.
    #[serde(default)]
    pub bound_lo: Option<f64>,
    #[serde(default)]
    pub bound_hi: Option<f64>,
}

impl Default for PsoSection {
    fn default() -> Self {
        Self {
            kappa: 100.0,
            particles: 128,
            iterations: 200,
            instances: 20,
            seed: 3,
            bound_lo: None,
            bound_hi: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Which split to evaluate: train | val | test.
    pub split: String,
    /// 0 = all instances of the split.
    pub instances: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { split: "test".into(), instances: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    /// 0 = all instances of the split.
    #[serde(default)]
    pub instances: usize,
    #[serde(default)]
    pub split: Option<String>,
}

/// Built-in presets mirroring the experiment hyperparameter appendices.
pub const PRESETS: &[(&str, &str)] = &[
    ("bqp3x2", include_str!("../presets/bqp3x2.toml")),
    ("bqp6x4", include_str!("../presets/bqp6x4.toml")),
    ("bqp9x6", include_str!("../presets/bqp9x6.toml")),
    ("twotank", include_str!("../presets/twotank.toml")),
    ("twotank-desk", include_str!("../presets/twotank-desk.toml")),
    ("hvac", include_str!("../presets/hvac.toml")),
    ("hvac-desk", include_str!("../presets/hvac-desk.toml")),
];

pub fn load_preset(name: &str) -> Option<RunConfig> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| toml::from_str(text).expect("built-in preset must parse"))
}

pub fn load_config(path: &Path) -> anyhow::Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
    Ok(toml::from_str(&text)?)
}

impl RunConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.out_dir.join("dataset.json")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.out_dir.join("checkpoint.json")
    }
}
