//! Single-document JSON checkpoint with an embedded SHA-256 content hash.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Model, TrainConfig};
use crate::error::{contract, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Hex SHA-256 of the compact JSON encoding of `value`.
pub fn content_hash<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub dim: usize,
    pub classes: usize,
    pub seed: u64,
    pub config: TrainConfig,
    pub model: Model,
    pub content_hash: String,
}

#[derive(Serialize)]
struct Hashed<'a> {
    version: u32,
    dim: usize,
    classes: usize,
    seed: u64,
    config: &'a TrainConfig,
    model: &'a Model,
}

impl Checkpoint {
    pub fn new(model: Model, config: TrainConfig, seed: u64) -> Result<Self> {
        model.validate()?;
        let mut ckpt = Self {
            version: CHECKPOINT_VERSION,
            dim: model.params.dim(),
            classes: model.params.classes(),
            seed,
            config,
            model,
            content_hash: String::new(),
        };
        ckpt.content_hash = ckpt.compute_hash()?;
        Ok(ckpt)
    }

    fn compute_hash(&self) -> Result<String> {
        content_hash(&Hashed {
            version: self.version,
            dim: self.dim,
            classes: self.classes,
            seed: self.seed,
            config: &self.config,
            model: &self.model,
        })
    }

    /// Parses and verifies version, hash and internal consistency.
    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Self = serde_json::from_str(text)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(contract(format!("unsupported checkpoint version {}", ckpt.version)));
        }
        let expected = ckpt.compute_hash()?;
        if expected != ckpt.content_hash {
            return Err(contract(format!(
                "checkpoint hash mismatch: stored {}, computed {expected}",
                ckpt.content_hash
            )));
        }
        ckpt.model.validate()?;
        if ckpt.model.params.dim() != ckpt.dim || ckpt.model.params.classes() != ckpt.classes {
            return Err(contract("checkpoint header disagrees with model shape"));
        }
        Ok(ckpt)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
