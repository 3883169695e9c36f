//! Deterministic f64 math shared by every pathway.
//!
//! Features are plain `[f64]` slices; probability vectors are wrapped in
//! [`PhaseDistribution`] so the simplex invariant is checked once at the
//! boundary instead of everywhere they are consumed.

use serde::{Deserialize, Serialize};

use crate::error::{check_dims, contract, Result};

/// Norms below this are treated as zero by [`cosine`].
pub const NORM_EPS: f64 = 1e-12;

/// Tolerance on the sum of a probability vector.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// A probability vector over `C >= 2` phases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct PhaseDistribution(Vec<f64>);

impl PhaseDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(contract(format!("phase distribution needs at least 2 classes, got {}", probs.len())));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
            return Err(contract("phase distribution entries must lie in [0, 1]"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(contract(format!("phase distribution sums to {total}, expected 1")));
        }
        Ok(Self(probs))
    }

    /// Softmax of `logits`; always a valid distribution for finite input.
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        let probs = softmax(logits)?;
        if probs.len() < 2 {
            return Err(contract("phase distribution needs at least 2 classes"));
        }
        Ok(Self(probs))
    }

    pub fn uniform(classes: usize) -> Self {
        assert!(classes >= 2, "uniform distribution needs at least 2 classes");
        Self(vec![1.0 / classes as f64; classes])
    }

    pub fn one_hot(classes: usize, index: usize) -> Self {
        assert!(classes >= 2 && index < classes);
        let mut probs = vec![0.0; classes];
        probs[index] = 1.0;
        Self(probs)
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Index of the most probable class; the lowest index wins ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn max(&self) -> f64 {
        self.0[self.argmax()]
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for PhaseDistribution {
    type Error = crate::Error;

    fn try_from(value: Vec<f64>) -> Result<Self> {
        Self::new(value)
    }
}

impl From<PhaseDistribution> for Vec<f64> {
    fn from(value: PhaseDistribution) -> Self {
        value.0
    }
}

impl AsRef<[f64]> for PhaseDistribution {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; 0 when either vector has (near-)zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dims("cosine", a.len(), b.len())?;
    Ok(cosine_with_norms(a, norm(a), b, norm(b)))
}

/// Cosine similarity with precomputed norms. Callers guarantee equal lengths.
pub(crate) fn cosine_with_norms(a: &[f64], norm_a: f64, b: &[f64], norm_b: f64) -> f64 {
    if norm_a < NORM_EPS || norm_b < NORM_EPS {
        return 0.0;
    }
    (dot(a, b) / (norm_a * norm_b)).clamp(-1.0, 1.0)
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Max-shifted softmax.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(contract("softmax of an empty vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(contract("softmax input must be finite"));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Logistic function, evaluated on the branch that never overflows.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn entropy(p: &PhaseDistribution) -> f64 {
    let h: f64 = p.as_slice().iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum();
    h.max(0.0)
}

/// First index of the maximum entry.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// `out = m * x` for a row-major `rows x x.len()` matrix.
pub(crate) fn mat_vec(m: &[f64], rows: usize, x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    debug_assert_eq!(m.len(), rows * cols);
    m.chunks_exact(cols).map(|row| dot(row, x)).collect()
}

/// `y += alpha * x`
pub(crate) fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
