//! Frame-level metrics, jitter diagnostics and report files.
//!
//! All rates are percentages. Macro averages run over the classes that
//! occur in the ground truth; a class that occurs but is never predicted
//! contributes precision 0.

mod experiment;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use experiment::{
    ablation_run, evaluate_model, sweep, AblationRow, AblationRun, AblationTable, MeanStd, SweepParam, SweepRow,
    SweepTable, SWEEP_K, SWEEP_THETA,
};

use crate::error::{contract, Result};
use crate::model::SequenceResult;
use crate::synth::LabeledSequence;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    /// Ground-truth frames of this class.
    pub support: u64,
    pub predicted: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub jaccard: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: usize,
    pub frames: u64,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub macro_jaccard: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[gt][pred]` frame counts.
    pub confusion: Vec<Vec<u64>>,
    pub jitter_pred: u64,
    pub jitter_gt: u64,
    /// `jitter_pred / max(jitter_gt, 1)`.
    pub jitter_ratio: f64,
}

/// Label changes between consecutive frames.
pub fn label_changes(labels: &[usize]) -> u64 {
    labels.windows(2).filter(|w| w[0] != w[1]).count() as u64
}

#[derive(Clone, Debug, PartialEq)]
struct Tally {
    confusion: Vec<u64>,
    jitter_pred: u64,
    jitter_gt: u64,
}

impl Tally {
    fn new(classes: usize) -> Self {
        Self { confusion: vec![0; classes * classes], jitter_pred: 0, jitter_gt: 0 }
    }

    fn merge(mut self, other: Tally) -> Tally {
        for (a, b) in self.confusion.iter_mut().zip(other.confusion) {
            *a += b;
        }
        self.jitter_pred += other.jitter_pred;
        self.jitter_gt += other.jitter_gt;
        self
    }
}

fn tally(pred: &[usize], gt: &[usize], classes: usize) -> Result<Tally> {
    if pred.len() != gt.len() {
        return Err(contract(format!("{} predictions for {} labels", pred.len(), gt.len())));
    }
    let mut t = Tally::new(classes);
    for (&p, &g) in pred.iter().zip(gt) {
        if p >= classes || g >= classes {
            return Err(contract(format!("label pair ({g}, {p}) out of range 0..{classes}")));
        }
        t.confusion[g * classes + p] += 1;
    }
    t.jitter_pred = label_changes(pred);
    t.jitter_gt = label_changes(gt);
    Ok(t)
}

fn pct(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

/// Pools per-sequence predictions against ground truth.
pub fn evaluate<P, G>(preds: &[P], gts: &[G], classes: usize) -> Result<MetricsReport>
where
    P: AsRef<[usize]> + Sync,
    G: AsRef<[usize]> + Sync,
{
    if preds.len() != gts.len() {
        return Err(contract(format!("{} predicted sequences for {} labelled", preds.len(), gts.len())));
    }
    if classes == 0 {
        return Err(contract("evaluation needs at least one class"));
    }
    let t = preds
        .par_iter()
        .zip(gts.par_iter())
        .map(|(p, g)| tally(p.as_ref(), g.as_ref(), classes))
        .try_reduce(|| Tally::new(classes), |a, b| Ok(a.merge(b)))?;

    let c = classes;
    let at = |g: usize, p: usize| t.confusion[g * c + p];
    let frames: u64 = t.confusion.iter().sum();
    let correct: u64 = (0..c).map(|k| at(k, k)).sum();
    let mut per_class = Vec::with_capacity(c);
    for k in 0..c {
        let tp = at(k, k);
        let support: u64 = (0..c).map(|p| at(k, p)).sum();
        let predicted: u64 = (0..c).map(|g| at(g, k)).sum();
        let precision = pct(tp, predicted);
        let recall = pct(tp, support);
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        let jaccard = pct(tp, support + predicted - tp);
        per_class.push(ClassMetrics { class: k, support, predicted, precision, recall, f1, jaccard });
    }
    let present: Vec<&ClassMetrics> = per_class.iter().filter(|m| m.support > 0).collect();
    let macro_of = |f: fn(&ClassMetrics) -> f64| {
        if present.is_empty() {
            0.0
        } else {
            present.iter().map(|m| f(m)).sum::<f64>() / present.len() as f64
        }
    };
    Ok(MetricsReport {
        classes: c,
        frames,
        accuracy: pct(correct, frames),
        macro_precision: macro_of(|m| m.precision),
        macro_recall: macro_of(|m| m.recall),
        macro_f1: macro_of(|m| m.f1),
        macro_jaccard: macro_of(|m| m.jaccard),
        confusion: t.confusion.chunks(c).map(<[u64]>::to_vec).collect(),
        per_class,
        jitter_pred: t.jitter_pred,
        jitter_gt: t.jitter_gt,
        jitter_ratio: t.jitter_pred as f64 / t.jitter_gt.max(1) as f64,
    })
}

pub fn write_metrics_json(report: &MetricsReport, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}

pub fn write_per_class_csv(report: &MetricsReport, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for m in &report.per_class {
        w.serialize(m)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_confusion_csv(report: &MetricsReport, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["gt".to_string()];
    header.extend((0..report.classes).map(|k| format!("pred_{k}")));
    w.write_record(&header)?;
    for (g, row) in report.confusion.iter().enumerate() {
        let mut rec = vec![g.to_string()];
        rec.extend(row.iter().map(u64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// One row per frame: `sequence_id,t,gt,baseline_pred,final_pred,g_m,g_u`.
pub fn write_predictions_csv(
    results: &[SequenceResult],
    truth: &[LabeledSequence],
    path: impl AsRef<Path>,
) -> Result<()> {
    if results.len() != truth.len() {
        return Err(contract("predictions and ground truth cover different sequences"));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["sequence_id", "t", "gt", "baseline_pred", "final_pred", "g_m", "g_u"])?;
    for (res, seq) in results.iter().zip(truth) {
        if res.id != seq.id || res.records.len() != seq.len() {
            return Err(contract(format!("prediction stream {} does not match sequence {}", res.id, seq.id)));
        }
        for (r, gt) in res.records.iter().zip(&seq.labels) {
            w.write_record([
                res.id.clone(),
                r.t.to_string(),
                gt.to_string(),
                r.baseline_pred().to_string(),
                r.final_pred().to_string(),
                r.g_m.to_string(),
                r.g_u.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_prediction() {
        let gt = vec![vec![0, 0, 1, 2, 2, 2], vec![2, 2, 0]];
        let r = evaluate(&gt, &gt, 4).unwrap();
        assert_eq!(r.accuracy, 100.0);
        assert_eq!((r.macro_precision, r.macro_recall, r.macro_f1, r.macro_jaccard), (100.0, 100.0, 100.0, 100.0));
        assert_eq!(r.jitter_ratio, 1.0);
    }

    #[test]
    fn hand_tabulated_two_class_example() {
        let r = evaluate(&[vec![0, 1, 0, 1]], &[vec![0, 0, 1, 1]], 2).unwrap();
        assert_eq!(r.accuracy, 50.0);
        for m in &r.per_class {
            assert_eq!((m.precision, m.recall), (50.0, 50.0));
            assert!((m.jaccard - 100.0 / 3.0).abs() < 1e-12);
        }
        assert_eq!(r.macro_f1, 50.0);
        assert!((r.macro_jaccard - 33.33).abs() < 0.01);
        assert_eq!((r.jitter_pred, r.jitter_gt, r.jitter_ratio), (3, 1, 3.0));
        assert_eq!(r.confusion, vec![vec![1, 1], vec![1, 1]]);
    }

    #[test]
    fn constant_prediction_on_balanced_truth() {
        let r = evaluate(&[vec![0, 0, 0, 0]], &[vec![0, 0, 1, 1]], 2).unwrap();
        assert_eq!(r.accuracy, 50.0);
        assert!((r.per_class[0].f1 - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.per_class[1].f1, 0.0);
        assert!((r.macro_f1 - 100.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn absent_classes_are_excluded_from_macro() {
        // class 2 never occurs in gt but is predicted once
        let r = evaluate(&[vec![0, 1, 2]], &[vec![0, 1, 1]], 3).unwrap();
        assert_eq!(r.macro_recall, 75.0);
        assert_eq!(r.per_class[2].support, 0);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        assert!(evaluate(&[vec![0, 1]], &[vec![0]], 2).is_err());
        assert!(evaluate(&[vec![0]], &[vec![0], vec![1]], 2).is_err());
        assert!(evaluate(&[vec![3]], &[vec![0]], 2).is_err());
    }

    #[test]
    fn report_files_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let r = evaluate(&[vec![0, 1, 0, 1]], &[vec![0, 0, 1, 1]], 2).unwrap();
        write_metrics_json(&r, dir.path().join("m.json")).unwrap();
        write_per_class_csv(&r, dir.path().join("c.csv")).unwrap();
        write_confusion_csv(&r, dir.path().join("x.csv")).unwrap();
        let back: MetricsReport =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("m.json")).unwrap()).unwrap();
        assert_eq!(back, r);
        let conf = std::fs::read_to_string(dir.path().join("x.csv")).unwrap();
        assert_eq!(conf, "gt,pred_0,pred_1\n0,1,1\n1,1,1\n");
    }

    fn sequences(classes: usize) -> impl Strategy<Value = Vec<(Vec<usize>, Vec<usize>)>> {
        prop::collection::vec(
            (1usize..40)
                .prop_flat_map(move |n| (prop::collection::vec(0..classes, n), prop::collection::vec(0..classes, n))),
            1..6,
        )
    }

    proptest! {
        #[test]
        fn confusion_is_consistent(seqs in sequences(4)) {
            let (preds, gts): (Vec<_>, Vec<_>) = seqs.into_iter().unzip();
            let r = evaluate(&preds, &gts, 4).unwrap();
            let total: usize = gts.iter().map(Vec::len).sum();
            prop_assert_eq!(r.frames, total as u64);
            let trace: u64 = (0..4).map(|k| r.confusion[k][k]).sum();
            prop_assert_eq!(r.accuracy, 100.0 * trace as f64 / total as f64);
            for k in 0..4 {
                let support = gts.iter().flatten().filter(|&&g| g == k).count() as u64;
                prop_assert_eq!(r.confusion[k].iter().sum::<u64>(), support);
            }
            for m in &r.per_class {
                for v in [m.precision, m.recall, m.f1, m.jaccard] {
                    prop_assert!((0.0..=100.0).contains(&v));
                }
            }
            let scan: u64 = preds.iter().map(|p| (1..p.len()).filter(|&t| p[t] != p[t - 1]).count() as u64).sum();
            prop_assert_eq!(r.jitter_pred, scan);
        }

        #[test]
        fn order_of_sequences_does_not_matter(seqs in sequences(3)) {
            let (preds, gts): (Vec<_>, Vec<_>) = seqs.iter().cloned().unzip();
            let (rp, rg): (Vec<_>, Vec<_>) = seqs.into_iter().rev().unzip();
            prop_assert_eq!(evaluate(&preds, &gts, 3).unwrap(), evaluate(&rp, &rg, 3).unwrap());
        }

        #[test]
        fn perfect_macro_f1_under_imbalance(gt in prop::collection::vec(prop_oneof![9 => Just(0usize), 1 => Just(1usize), 1 => Just(2usize)], 1..200)) {
            let r = evaluate(std::slice::from_ref(&gt), std::slice::from_ref(&gt), 3).unwrap();
            prop_assert_eq!(r.macro_f1, 100.0);
        }
    }
}
