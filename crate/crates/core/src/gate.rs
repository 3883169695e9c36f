//! Confidence-driven mixing of the two pathways and the shared linear head.

use serde::{Deserialize, Serialize};

use crate::error::{check_dims, contract, Result};
use crate::numerics::{self, sigmoid, PhaseDistribution};

/// Bounds applied to the learnable gate slopes after every update.
pub const GATE_SLOPE_MIN: f64 = 0.01;
pub const GATE_SLOPE_MAX: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateParams {
    /// Learnable slope of the memory gate.
    pub a_m: f64,
    /// Learnable slope of the prototype gate.
    pub a_u: f64,
    /// Fixed confidence threshold of the memory gate.
    pub tau_m: f64,
    /// Fixed confidence threshold of the prototype gate.
    pub tau_u: f64,
}

impl Default for GateParams {
    fn default() -> Self {
        Self { a_m: 4.0, a_u: 4.0, tau_m: 0.7, tau_u: 0.7 }
    }
}

impl GateParams {
    pub fn validate(&self) -> Result<()> {
        if ![self.a_m, self.a_u, self.tau_m, self.tau_u].iter().all(|x| x.is_finite()) {
            return Err(contract("gate parameters must be finite"));
        }
        Ok(())
    }

    pub fn clamp_slopes(&mut self) {
        self.a_m = self.a_m.clamp(GATE_SLOPE_MIN, GATE_SLOPE_MAX);
        self.a_u = self.a_u.clamp(GATE_SLOPE_MIN, GATE_SLOPE_MAX);
    }
}

/// `(g_m, g_u) = (sigmoid(a_m (tau_m - c)), sigmoid(a_u (tau_u - c)))`
pub fn gates(confidence: f64, g: &GateParams) -> (f64, f64) {
    (sigmoid(g.a_m * (g.tau_m - confidence)), sigmoid(g.a_u * (g.tau_u - confidence)))
}

/// `f_t + g_m f_m + g_u f_u`
pub fn integrate(f_t: &[f64], f_m: &[f64], f_u: &[f64], g_m: f64, g_u: f64) -> Result<Vec<f64>> {
    check_dims("integrate memory", f_t.len(), f_m.len())?;
    check_dims("integrate prototype", f_t.len(), f_u.len())?;
    Ok(f_t.iter().zip(f_m).zip(f_u).map(|((t, m), u)| t + g_m * m + g_u * u).collect())
}

/// Bias-free linear head, `C x D` row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierHead {
    pub classes: usize,
    pub dim: usize,
    pub weight: Vec<f64>,
}

impl ClassifierHead {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self { classes, dim, weight: vec![0.0; classes * dim] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(contract("classifier needs at least 2 classes"));
        }
        check_dims("classifier weight", self.weight.len(), self.classes * self.dim)?;
        if self.weight.iter().any(|x| !x.is_finite()) {
            return Err(contract("classifier weights must be finite"));
        }
        Ok(())
    }

    pub fn logits(&self, f: &[f64]) -> Result<Vec<f64>> {
        check_dims("classifier input", f.len(), self.dim)?;
        Ok(numerics::mat_vec(&self.weight, self.classes, f))
    }
}

/// `softmax(W f)`
pub fn classify(f: &[f64], head: &ClassifierHead) -> Result<PhaseDistribution> {
    PhaseDistribution::from_logits(&head.logits(f)?)
}
