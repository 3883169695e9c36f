use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use dsted_core::eval::{self, AblationTable, SweepTable};
use dsted_core::synth::{self, LabeledSequence};
use dsted_core::{Checkpoint, Error, SequenceResult, Variant};
use serde::Serialize;

use crate::config::RunConfig;
use crate::Common;

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Resolves the configuration and prepares the output directory, which
/// always receives the resolved `config.json`.
fn setup(common: &Common) -> Result<RunConfig> {
    let cfg = RunConfig::resolve(common.config.as_deref(), &common.sets, common.seed)?;
    fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    write_json(&common.out.join("config.json"), &cfg)?;
    Ok(cfg)
}

fn load_data(cfg: &RunConfig, data: Option<&Path>) -> Result<Vec<LabeledSequence>> {
    match data {
        Some(dir) => {
            let (seqs, manifest) = synth::read_dataset(dir).with_context(|| format!("loading {}", dir.display()))?;
            if manifest.classes != cfg.classes {
                return Err(Error::Config(format!(
                    "dataset has {} classes but the pipeline is configured for {}",
                    manifest.classes, cfg.classes
                ))
                .into());
            }
            Ok(seqs)
        }
        None => Ok(synth::generate(&cfg.workflow, cfg.n_sequences, cfg.seed)?),
    }
}

fn split(cfg: &RunConfig, data: Option<&Path>) -> Result<(Vec<LabeledSequence>, Vec<LabeledSequence>)> {
    let seqs = load_data(cfg, data)?;
    Ok(synth::split(&seqs, cfg.train_fraction, cfg.seed)?)
}

pub fn synth(common: &Common) -> Result<()> {
    let cfg = setup(common)?;
    let seqs = synth::generate(&cfg.workflow, cfg.n_sequences, cfg.seed)?;
    let files = synth::write_dataset(&common.out, &seqs, cfg.classes, Some(&cfg.workflow), Some(cfg.seed))?;
    let frames: usize = seqs.iter().map(LabeledSequence::len).sum();
    println!("wrote {} sequences ({frames} frames) to {}", files.len(), common.out.display());
    Ok(())
}

pub fn train(common: &Common, data: Option<&Path>) -> Result<()> {
    let cfg = setup(common)?;
    let (train_set, _) = split(&cfg, data)?;
    let trained = dsted_core::train(&train_set, cfg.classes, &cfg.train, cfg.seed)?;
    let ckpt = Checkpoint::new(trained.model, cfg.train.clone(), cfg.seed)?;
    ckpt.save(common.out.join("checkpoint.json"))?;
    write_json(&common.out.join("training_log.json"), &trained.log)?;
    for e in &trained.log.epochs {
        println!(
            "epoch {:>3}  loss {:.5}  ce {:.5}  kl {:.5}  acc {:.4}  prototypes {}",
            e.epoch, e.loss, e.ce, e.kl, e.accuracy, e.prototypes
        );
    }
    println!("checkpoint {}", ckpt.content_hash);
    Ok(())
}

fn report_line(name: &str, m: &eval::MetricsReport) -> String {
    format!(
        "{name:<9} acc {:6.2}  P {:6.2}  R {:6.2}  F1 {:6.2}  J {:6.2}  jitter {:.3}",
        m.accuracy, m.macro_precision, m.macro_recall, m.macro_f1, m.macro_jaccard, m.jitter_ratio
    )
}

pub fn eval(common: &Common, checkpoint: &Path, data: Option<&Path>, all: bool) -> Result<()> {
    let cfg = setup(common)?;
    let ckpt = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    if ckpt.classes != cfg.classes {
        return Err(Error::Config(format!(
            "checkpoint has {} classes but the pipeline is configured for {}",
            ckpt.classes, cfg.classes
        ))
        .into());
    }
    let test = if all { load_data(&cfg, data)? } else { split(&cfg, data)?.1 };
    let (metrics, results) = eval::evaluate_model(&ckpt.model, &test)?;
    let baseline_preds: Vec<Vec<usize>> = results.iter().map(SequenceResult::baseline_preds).collect();
    let gts: Vec<&[usize]> = test.iter().map(|s| s.labels.as_slice()).collect();
    let baseline = eval::evaluate(&baseline_preds, &gts, cfg.classes)?;

    let out = &common.out;
    eval::write_metrics_json(&metrics, out.join("metrics.json"))?;
    eval::write_metrics_json(&baseline, out.join("baseline_metrics.json"))?;
    eval::write_per_class_csv(&metrics, out.join("per_class.csv"))?;
    eval::write_confusion_csv(&metrics, out.join("confusion.csv"))?;
    eval::write_predictions_csv(&results, &test, out.join("predictions.csv"))?;
    println!("{}", report_line("baseline", &baseline));
    println!("{}", report_line("final", &metrics));
    Ok(())
}

fn write_ablation(out: &Path, table: &AblationTable) -> Result<()> {
    write_json(&out.join("ablation.json"), table)?;
    let mut w = csv::Writer::from_path(out.join("ablation.csv"))?;
    w.write_record([
        "variant",
        "accuracy",
        "accuracy_std",
        "precision",
        "precision_std",
        "recall",
        "recall_std",
        "f1",
        "f1_std",
        "jaccard",
        "jaccard_std",
        "jitter_ratio",
        "jitter_ratio_std",
    ])?;
    for r in &table.rows {
        let mut rec = vec![r.label.clone()];
        for m in [r.accuracy, r.precision, r.recall, r.f1, r.jaccard, r.jitter_ratio] {
            rec.push(m.mean.to_string());
            rec.push(m.std.to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(out.join("ablation_runs.csv"))?;
    w.write_record(["variant", "seed", "accuracy", "f1", "jaccard", "jitter_ratio"])?;
    for r in &table.runs {
        let m = &r.metrics;
        w.write_record([
            r.variant.key().to_string(),
            r.seed.to_string(),
            m.accuracy.to_string(),
            m.macro_f1.to_string(),
            m.macro_jaccard.to_string(),
            m.jitter_ratio.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn ablate(common: &Common, data: Option<&Path>) -> Result<()> {
    let cfg = setup(common)?;
    let (train_set, test_set) = split(&cfg, data)?;
    let table = eval::ablation_run(&train_set, &test_set, cfg.classes, &cfg.train, &cfg.ablation_seeds)?;
    write_ablation(&common.out, &table)?;
    println!("{:<9} {:>15} {:>15} {:>15} {:>13}", "variant", "accuracy", "F1", "Jaccard", "jitter");
    for r in &table.rows {
        println!(
            "{:<9} {:>7.2} ± {:<5.2} {:>7.2} ± {:<5.2} {:>7.2} ± {:<5.2} {:>6.3} ± {:<5.3}",
            r.label,
            r.accuracy.mean,
            r.accuracy.std,
            r.f1.mean,
            r.f1.std,
            r.jaccard.mean,
            r.jaccard.std,
            r.jitter_ratio.mean,
            r.jitter_ratio.std
        );
    }
    let base = table.per_seed(Variant::Baseline, |m| m.accuracy);
    for v in [Variant::Rmp, Variant::Upr, Variant::Both, Variant::Full] {
        let wins = table.per_seed(v, |m| m.accuracy).iter().zip(&base).filter(|(a, b)| a > b).count();
        println!("{:<9} beats baseline in {wins}/{} seeds", v.label(), base.len());
    }
    Ok(())
}

fn write_sweep(out: &Path, table: &SweepTable) -> Result<()> {
    write_json(&out.join("sweep.json"), table)?;
    let mut w = csv::Writer::from_path(out.join("sweep.csv"))?;
    w.write_record(["param", "value", "accuracy", "accuracy_std", "f1", "jaccard", "jitter_ratio", "mean_selected"])?;
    for r in &table.rows {
        w.write_record([
            serde_json::to_value(r.param)?.as_str().unwrap_or_default().to_string(),
            r.value.to_string(),
            r.accuracy.mean.to_string(),
            r.accuracy.std.to_string(),
            r.f1.mean.to_string(),
            r.jaccard.mean.to_string(),
            r.jitter_ratio.mean.to_string(),
            r.mean_selected.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn sweep(common: &Common, data: Option<&Path>) -> Result<()> {
    let cfg = setup(common)?;
    let (train_set, test_set) = split(&cfg, data)?;
    let table = eval::sweep(&train_set, &test_set, cfg.classes, &cfg.train, &cfg.sweep_seeds)?;
    write_sweep(&common.out, &table)?;
    for r in &table.rows {
        println!(
            "{:?}={:<5} acc {:6.2} ± {:<5.2} F1 {:6.2}  selected/frame {:.2}",
            r.param, r.value, r.accuracy.mean, r.accuracy.std, r.f1.mean, r.mean_selected
        );
    }
    println!("theta spread {:.2} points, k spread {:.2} points", table.theta_spread, table.k_spread);
    Ok(())
}
