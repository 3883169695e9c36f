//! Seeded ablation and hyperparameter sweeps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate, MetricsReport};
use crate::error::{Error, Result};
use crate::model::{run_sequences, train, Model, SequenceResult, TrainConfig, Variant};
use crate::synth::LabeledSequence;

pub const SWEEP_THETA: [f64; 4] = [0.25, 0.5, 0.75, 1.0];
pub const SWEEP_K: [usize; 3] = [4, 8, 16];

/// Runs `model` over `test` and scores its final predictions.
pub fn evaluate_model(model: &Model, test: &[LabeledSequence]) -> Result<(MetricsReport, Vec<SequenceResult>)> {
    let results = run_sequences(model, test)?;
    let preds: Vec<Vec<usize>> = results.iter().map(SequenceResult::final_preds).collect();
    let gts: Vec<&[usize]> = test.iter().map(|s| s.labels.as_slice()).collect();
    Ok((evaluate(&preds, &gts, model.params.classes())?, results))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var =
            if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: Variant,
    pub seed: u64,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub label: String,
    pub accuracy: MeanStd,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f1: MeanStd,
    pub jaccard: MeanStd,
    pub jitter_ratio: MeanStd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    pub runs: Vec<AblationRun>,
}

impl AblationTable {
    /// Per-seed values of `metric` for `variant`, in seed order.
    pub fn per_seed(&self, variant: Variant, metric: impl Fn(&MetricsReport) -> f64) -> Vec<f64> {
        self.seeds
            .iter()
            .map(|&s| {
                let run = self.runs.iter().find(|r| r.variant == variant && r.seed == s).expect("complete table");
                metric(&run.metrics)
            })
            .collect()
    }

    pub fn row(&self, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

/// Trains and evaluates every variant on identical data for every seed.
/// Runs fan out across the rayon pool; each training run is sequential.
pub fn ablation_run(
    train_set: &[LabeledSequence],
    test_set: &[LabeledSequence],
    classes: usize,
    base: &TrainConfig,
    seeds: &[u64],
) -> Result<AblationTable> {
    if seeds.len() < 2 {
        return Err(Error::Config("an ablation needs at least 2 seeds".into()));
    }
    let jobs: Vec<(Variant, u64)> = Variant::ALL.iter().flat_map(|&v| seeds.iter().map(move |&s| (v, s))).collect();
    let runs = jobs
        .par_iter()
        .map(|&(variant, seed)| {
            let cfg = TrainConfig { variant, ..base.clone() };
            let trained = train(train_set, classes, &cfg, seed)?;
            let (metrics, _) = evaluate_model(&trained.model, test_set)?;
            Ok(AblationRun { variant, seed, metrics })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut table = AblationTable { seeds: seeds.to_vec(), rows: Vec::new(), runs };
    for v in Variant::ALL {
        let stat = |f: fn(&MetricsReport) -> f64| MeanStd::of(&table.per_seed(v, f));
        let row = AblationRow {
            variant: v,
            label: v.label().to_string(),
            accuracy: stat(|m| m.accuracy),
            precision: stat(|m| m.macro_precision),
            recall: stat(|m| m.macro_recall),
            f1: stat(|m| m.macro_f1),
            jaccard: stat(|m| m.macro_jaccard),
            jitter_ratio: stat(|m| m.jitter_ratio),
        };
        table.rows.push(row);
    }
    Ok(table)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Theta,
    K,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: SweepParam,
    pub value: f64,
    pub accuracy: MeanStd,
    pub f1: MeanStd,
    pub jaccard: MeanStd,
    pub jitter_ratio: MeanStd,
    /// Mean memories passing the threshold per test frame.
    pub mean_selected: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<SweepRow>,
    /// Max minus min mean accuracy over the θ rows.
    pub theta_spread: f64,
    /// Max minus min mean accuracy over the k rows.
    pub k_spread: f64,
}

/// Full-variant runs over the θ grid (other settings from `base`) and
/// over the k grid.
pub fn sweep(
    train_set: &[LabeledSequence],
    test_set: &[LabeledSequence],
    classes: usize,
    base: &TrainConfig,
    seeds: &[u64],
) -> Result<SweepTable> {
    if seeds.is_empty() {
        return Err(Error::Config("a sweep needs at least 1 seed".into()));
    }
    let mut settings: Vec<(SweepParam, f64, TrainConfig)> = Vec::new();
    for theta in SWEEP_THETA {
        let mut cfg = base.clone();
        cfg.rmp.threshold = theta;
        settings.push((SweepParam::Theta, theta, cfg));
    }
    for k in SWEEP_K {
        let mut cfg = base.clone();
        cfg.upr.retrieval_k = k;
        settings.push((SweepParam::K, k as f64, cfg));
    }
    let jobs: Vec<(usize, u64)> = (0..settings.len()).flat_map(|i| seeds.iter().map(move |&s| (i, s))).collect();
    let runs = jobs
        .par_iter()
        .map(|&(i, seed)| {
            let trained = train(train_set, classes, &settings[i].2, seed)?;
            let (metrics, results) = evaluate_model(&trained.model, test_set)?;
            let frames: usize = results.iter().map(|r| r.records.len()).sum();
            let selected: usize = results.iter().flat_map(|r| &r.records).map(|r| r.selected_memories).sum();
            Ok((metrics, selected as f64 / frames.max(1) as f64))
        })
        .collect::<Result<Vec<_>>>()?;

    let n = seeds.len();
    let rows: Vec<SweepRow> = settings
        .iter()
        .enumerate()
        .map(|(i, (param, value, _))| {
            let chunk = &runs[i * n..(i + 1) * n];
            let stat = |f: fn(&MetricsReport) -> f64| MeanStd::of(&chunk.iter().map(|(m, _)| f(m)).collect::<Vec<_>>());
            SweepRow {
                param: *param,
                value: *value,
                accuracy: stat(|m| m.accuracy),
                f1: stat(|m| m.macro_f1),
                jaccard: stat(|m| m.macro_jaccard),
                jitter_ratio: stat(|m| m.jitter_ratio),
                mean_selected: chunk.iter().map(|(_, s)| s).sum::<f64>() / n as f64,
            }
        })
        .collect();
    let spread = |p: SweepParam| {
        let acc: Vec<f64> = rows.iter().filter(|r| r.param == p).map(|r| r.accuracy.mean).collect();
        acc.iter().cloned().fold(f64::MIN, f64::max) - acc.iter().cloned().fold(f64::MAX, f64::min)
    };
    Ok(SweepTable {
        seeds: seeds.to_vec(),
        theta_spread: spread(SweepParam::Theta),
        k_spread: spread(SweepParam::K),
        rows,
    })
}
