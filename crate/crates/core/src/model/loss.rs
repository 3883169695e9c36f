use crate::error::{contract, Result};
use crate::numerics::PhaseDistribution;

/// Added inside the log of the cross-entropy.
pub const CE_EPS: f64 = 1e-12;

/// Class-weighted cross-entropy `-w_label ln(pred[label] + eps)`.
pub fn loss_ce(pred: &PhaseDistribution, label: usize, class_weights: &[f64]) -> Result<f64> {
    if label >= pred.num_classes() || class_weights.len() != pred.num_classes() {
        return Err(contract(format!(
            "label {label} / {} weights for {} classes",
            class_weights.len(),
            pred.num_classes()
        )));
    }
    Ok(-class_weights[label] * (pred.as_slice()[label] + CE_EPS).ln())
}

/// `KL(prev || curr)`. Infinite when `curr` puts zero mass where `prev`
/// does not.
pub fn loss_kl(prev: &PhaseDistribution, curr: &PhaseDistribution) -> Result<f64> {
    if prev.num_classes() != curr.num_classes() {
        return Err(contract("KL between distributions of different size"));
    }
    let kl: f64 =
        prev.as_slice().iter().zip(curr.as_slice()).filter(|(p, _)| **p > 0.0).map(|(p, q)| p * (p / q).ln()).sum();
    Ok(kl.max(0.0))
}

/// Inverse-frequency weights normalized to mean 1 over the classes that
/// occur in `labels`. Absent classes get weight 1.
pub fn class_weights<'a>(labels: impl IntoIterator<Item = &'a [usize]>, classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; classes];
    let mut total = 0usize;
    for seq in labels {
        for &l in seq {
            if l >= classes {
                return Err(contract(format!("label {l} out of range 0..{classes}")));
            }
            counts[l] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(contract("class weights need at least one label"));
    }
    let inv: Vec<f64> = counts.iter().map(|&c| if c > 0 { total as f64 / c as f64 } else { 0.0 }).collect();
    let present = counts.iter().filter(|&&c| c > 0).count() as f64;
    let mean = inv.iter().sum::<f64>() / present;
    Ok(inv.iter().zip(&counts).map(|(w, &c)| if c > 0 { w / mean } else { 1.0 }).collect())
}
