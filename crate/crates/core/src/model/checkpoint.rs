//! Versioned checkpoint records. JSON with shortest-roundtrip float
//! formatting, so the weight round-trip is bit-exact.

use super::{Model, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const CHECKPOINT_FORMAT: &str = "bilevel-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("bad checkpoint: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RngState {
    pub algorithm: String,
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: Model,
    pub train_config: TrainConfig,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn new(model: Model, train_config: TrainConfig, rng: RngState) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            model,
            train_config,
            rng,
        }
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let json = serde_json::to_string(ckpt)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let text = std::fs::read_to_string(path)?;
    let ckpt: Checkpoint = serde_json::from_str(&text)?;
    if ckpt.format != CHECKPOINT_FORMAT {
        return Err(CheckpointError::Format(format!("unknown format '{}'", ckpt.format)));
    }
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Format(format!("unsupported version {}", ckpt.version)));
    }
    if !ckpt.model.params.validate(&ckpt.model.spec) {
        return Err(CheckpointError::Format("weights do not match the spec".into()));
    }
    Ok(ckpt)
}
