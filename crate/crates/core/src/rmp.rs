//! Reliable memory propagation.
//!
//! A FIFO bank of the last `K` frames is scored against the current frame
//! by feature similarity, agreement of the baseline phase distributions and
//! temporal proximity. Entries scoring above the threshold are softmax
//! weighted into a context vector, which a linear fusion layer mixes with
//! the current feature.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{check_dims, contract, Error, Result};
use crate::numerics::{self, cosine_with_norms, dot, PhaseDistribution};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub feature: Vec<f64>,
    pub dist: PhaseDistribution,
    pub timestep: u64,
    #[serde(skip)]
    norm: Option<f64>,
}

impl MemoryEntry {
    pub fn new(feature: Vec<f64>, dist: PhaseDistribution, timestep: u64) -> Self {
        let norm = Some(numerics::norm(&feature));
        Self { feature, dist, timestep, norm }
    }

    fn norm(&self) -> f64 {
        self.norm.unwrap_or_else(|| numerics::norm(&self.feature))
    }
}

impl PartialEq for MemoryEntry {
    fn eq(&self, other: &Self) -> bool {
        self.feature == other.feature && self.dist == other.dist && self.timestep == other.timestep
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RmpConfig {
    /// Bank capacity `K`.
    pub capacity: usize,
    /// Reliability threshold applied to the raw score in (-1, 3].
    pub threshold: f64,
    /// Decay constant of the temporal term, in frames.
    pub tau_decay: f64,
}

impl Default for RmpConfig {
    fn default() -> Self {
        Self { capacity: 60, threshold: 0.75, tau_decay: 10.0 }
    }
}

impl RmpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.capacity == 0 {
            return Err(Error::Config("memory capacity must be at least 1".into()));
        }
        if !self.threshold.is_finite() || self.threshold <= -1.0 || self.threshold > 3.0 {
            return Err(Error::Config(format!("reliability threshold {} outside (-1, 3]", self.threshold)));
        }
        if !self.tau_decay.is_finite() || self.tau_decay <= 0.0 {
            return Err(Error::Config("tau_decay must be positive and finite".into()));
        }
        Ok(())
    }
}

/// Sliding window of the most recent frames, oldest first.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    entries: VecDeque<MemoryEntry>,
    capacity: usize,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "memory bank capacity must be positive");
        Self { entries: VecDeque::with_capacity(capacity), capacity }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl ExactSizeIterator<Item = &MemoryEntry> {
        self.entries.iter()
    }

    pub fn newest_timestep(&self) -> Option<u64> {
        self.entries.back().map(|e| e.timestep)
    }

    pub fn timesteps(&self) -> Vec<u64> {
        self.entries.iter().map(|e| e.timestep).collect()
    }

    /// Appends `entry`, evicting the oldest entry once the bank is full.
    pub fn push(&mut self, entry: MemoryEntry) -> Result<()> {
        if let Some(newest) = self.newest_timestep() {
            if entry.timestep <= newest {
                return Err(contract(format!(
                    "memory timestep {} does not follow newest timestep {newest}",
                    entry.timestep
                )));
            }
        }
        if let Some(first) = self.entries.front() {
            check_dims("memory push", first.feature.len(), entry.feature.len())?;
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(entry);
        Ok(())
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

/// Reliability of one memory entry relative to the frame at `t`:
/// `cos(f_t, f_i) + p_t . p_i + exp(-|t - i| / tau)`.
pub fn reliability(f_t: &[f64], p_t: &PhaseDistribution, entry: &MemoryEntry, t: u64, cfg: &RmpConfig) -> Result<f64> {
    check_dims("reliability feature", f_t.len(), entry.feature.len())?;
    check_dims("reliability distribution", p_t.num_classes(), entry.dist.num_classes())?;
    if t <= entry.timestep {
        return Err(contract(format!("reliability needs a past entry: t={t}, entry timestep={}", entry.timestep)));
    }
    Ok(reliability_unchecked(f_t, numerics::norm(f_t), p_t, entry, t, cfg))
}

fn reliability_unchecked(
    f_t: &[f64],
    f_norm: f64,
    p_t: &PhaseDistribution,
    entry: &MemoryEntry,
    t: u64,
    cfg: &RmpConfig,
) -> f64 {
    let s_sim = cosine_with_norms(f_t, f_norm, &entry.feature, entry.norm());
    let s_cls = dot(p_t.as_slice(), entry.dist.as_slice());
    let s_temp = (-((t - entry.timestep) as f64) / cfg.tau_decay).exp();
    s_sim + s_cls + s_temp
}

/// A memory entry that passed the reliability filter.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectedMemory<'a> {
    pub weight: f64,
    pub reliability: f64,
    pub timestep: u64,
    pub feature: &'a [f64],
}

/// Keeps entries with reliability strictly above the threshold and weights
/// them by a softmax over their reliabilities. An empty result is valid.
pub fn select_and_weight<'a>(
    bank: &'a MemoryBank,
    f_t: &[f64],
    p_t: &PhaseDistribution,
    t: u64,
    cfg: &RmpConfig,
) -> Result<Vec<SelectedMemory<'a>>> {
    if let Some(newest) = bank.newest_timestep() {
        if t <= newest {
            return Err(contract(format!("frame {t} is not after newest memory {newest}")));
        }
    }
    if let Some(first) = bank.entries.front() {
        check_dims("memory selection", f_t.len(), first.feature.len())?;
        check_dims("memory selection classes", p_t.num_classes(), first.dist.num_classes())?;
    }
    let f_norm = numerics::norm(f_t);
    let mut selected: Vec<SelectedMemory<'a>> = bank
        .entries
        .iter()
        .filter_map(|e| {
            let r = reliability_unchecked(f_t, f_norm, p_t, e, t, cfg);
            (r > cfg.threshold).then_some(SelectedMemory {
                weight: 0.0,
                reliability: r,
                timestep: e.timestep,
                feature: &e.feature,
            })
        })
        .collect();
    if selected.is_empty() {
        return Ok(selected);
    }
    let max = selected.iter().map(|s| s.reliability).fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = selected.iter().map(|s| (s.reliability - max).exp()).sum();
    for s in &mut selected {
        s.weight = (s.reliability - max).exp() / total;
    }
    Ok(selected)
}

/// `sum_i w_i f_i`, or `None` when nothing was selected.
pub fn weighted_context(selected: &[SelectedMemory<'_>]) -> Option<Vec<f64>> {
    let first = selected.first()?;
    let mut ctx = vec![0.0; first.feature.len()];
    for s in selected {
        numerics::axpy(&mut ctx, s.weight, s.feature);
    }
    Some(ctx)
}

/// Linear fusion of the current feature with the weighted memory context:
/// `W [f_t; ctx] + b`, with `W` of shape `D x 2D` stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionLayer {
    pub dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl FusionLayer {
    /// `[I | 0]` with zero bias: the pathway starts as the identity on `f_t`.
    pub fn identity(dim: usize) -> Self {
        let mut weight = vec![0.0; dim * 2 * dim];
        for i in 0..dim {
            weight[i * 2 * dim + i] = 1.0;
        }
        Self { dim, weight, bias: vec![0.0; dim] }
    }

    pub fn validate(&self) -> Result<()> {
        check_dims("fusion weight", self.weight.len(), self.dim * 2 * self.dim)?;
        check_dims("fusion bias", self.bias.len(), self.dim)?;
        if self.weight.iter().chain(&self.bias).any(|x| !x.is_finite()) {
            return Err(contract("fusion parameters must be finite"));
        }
        Ok(())
    }

    pub fn apply(&self, f_t: &[f64], ctx: &[f64]) -> Result<Vec<f64>> {
        check_dims("fusion input", f_t.len(), self.dim)?;
        check_dims("fusion context", ctx.len(), self.dim)?;
        let d = self.dim;
        Ok(self
            .weight
            .chunks_exact(2 * d)
            .zip(&self.bias)
            .map(|(row, b)| dot(&row[..d], f_t) + dot(&row[d..], ctx) + b)
            .collect())
    }
}

/// The refined feature `f_t^m`; `f_t` itself when nothing was selected.
pub fn refine(f_t: &[f64], selected: &[SelectedMemory<'_>], fusion: &FusionLayer) -> Result<Vec<f64>> {
    check_dims("refine", f_t.len(), fusion.dim)?;
    for s in selected {
        check_dims("refine memory", s.feature.len(), f_t.len())?;
    }
    match weighted_context(selected) {
        None => Ok(f_t.to_vec()),
        Some(ctx) => fusion.apply(f_t, &ctx),
    }
}
