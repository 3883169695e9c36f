//! Run configuration: one JSON document, overlaid on the defaults, then
//! patched by `--set key=value` overrides.

use std::path::Path;

use anyhow::{bail, Context, Result};
use dsted_core::{Error, TrainConfig, WorkflowSpec};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds data generation, the train/test split and training.
    pub seed: u64,
    /// Number of phases the pipeline classifies.
    pub classes: usize,
    pub workflow: WorkflowSpec,
    pub n_sequences: usize,
    pub train_fraction: f64,
    pub train: TrainConfig,
    /// Training seeds for `ablate`.
    pub ablation_seeds: Vec<u64>,
    /// Training seeds for `sweep`.
    pub sweep_seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            classes: 7,
            workflow: WorkflowSpec::default_benchmark(),
            n_sequences: 20,
            train_fraction: 0.7,
            train: TrainConfig::default(),
            ablation_seeds: (0..10).collect(),
            sweep_seeds: vec![0, 1, 2],
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> dsted_core::Result<()> {
        if self.workflow.num_phases() != self.classes {
            return Err(Error::Config(format!(
                "workflow has {} phases but the pipeline is configured for {} classes",
                self.workflow.num_phases(),
                self.classes
            )));
        }
        if self.classes < 2 {
            return Err(Error::Config("at least 2 classes are required".into()));
        }
        if self.n_sequences < 2 {
            return Err(Error::Config("n_sequences must be at least 2".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must lie in (0, 1)".into()));
        }
        self.workflow.validate()?;
        self.train.validate()
    }

    /// Defaults, overlaid with the file at `path` (if any), the overrides,
    /// and finally the explicit seed.
    pub fn resolve(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut value = serde_json::to_value(Self::default())?;
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let user: Value =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut value, user);
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg: Self = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(seed) = seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `a.b.c=value`; the value is read as JSON when it parses, else as a string.
fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let Some((key, raw)) = spec.split_once('=') else {
        bail!(Error::Config(format!("override `{spec}` is not key=value")));
    };
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = root;
    for part in key.split('.') {
        slot = match slot {
            Value::Object(map) => map.entry(part.to_string()).or_insert(Value::Null),
            Value::Array(items) => {
                let i: usize =
                    part.parse().map_err(|_| Error::Config(format!("override `{key}`: `{part}` is not an index")))?;
                items.get_mut(i).ok_or_else(|| Error::Config(format!("override `{key}`: index {i} out of range")))?
            }
            _ => bail!(Error::Config(format!("override `{key}`: `{part}` has no parent object"))),
        };
    }
    *slot = value;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::resolve(None, &[], None).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let sets = vec![
            "train.rmp.threshold=0.5".to_string(),
            "workflow.mean_durations.3=20".to_string(),
            "train.variant=rmp".to_string(),
        ];
        let cfg = RunConfig::resolve(None, &sets, Some(9)).unwrap();
        assert_eq!(cfg.train.rmp.threshold, 0.5);
        assert_eq!(cfg.workflow.mean_durations[3], 20.0);
        assert_eq!(cfg.train.variant, dsted_core::Variant::Rmp);
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::resolve(None, &["train.momentum=0.9".into()], None).is_err());
        assert!(RunConfig::resolve(None, &["nonsense".into()], None).is_err());
    }

    #[test]
    fn class_mismatch_is_rejected() {
        let err = RunConfig::resolve(None, &["classes=5".into()], None).unwrap_err();
        assert!(matches!(err.downcast_ref::<Error>(), Some(Error::Config(_))));
    }
}
