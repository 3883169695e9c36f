use dsted_core::eval::{ablation_run, evaluate};
use dsted_core::model::{frozen_contexts, max_relative_error, sequence_loss, sequence_loss_and_grad};
use dsted_core::synth::{generate, read_dataset, split, write_dataset, WorkflowSpec};
use dsted_core::{run_sequences, train, SequenceResult, TrainConfig, Variant};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_spec() -> WorkflowSpec {
    WorkflowSpec { mean_durations: vec![30.0, 40.0, 30.0, 8.0, 30.0, 30.0, 20.0], ..WorkflowSpec::default_benchmark() }
}

#[test]
fn gradient_matches_finite_differences_on_sampled_coordinates() {
    let data = generate(&tiny_spec(), 3, 21).unwrap();
    let trained = train(&data, 7, &TrainConfig { epochs: 2, ..TrainConfig::default() }, 8).unwrap();
    let mut model = trained.model;
    let mut rng = ChaCha8Rng::seed_from_u64(64);
    let theta: Vec<f64> = model.params.learnable().iter().map(|v| v + rng.random_range(-0.2..0.2)).collect();
    model.params.set_learnable(&theta).unwrap();

    let contexts = frozen_contexts(&model, &data[2]).unwrap();
    let weights = &trained.log.class_weights;
    let (_, grad) = sequence_loss_and_grad(&model.params, model.variant, &contexts, weights).unwrap();
    let coords = sample(&mut rng, theta.len(), 64).into_vec();
    let mut probe = model.params.clone();
    let err = max_relative_error(&theta, &grad.values, &coords, 1e-5, |v| {
        probe.set_learnable(v)?;
        sequence_loss(&probe, model.variant, &contexts, weights)
    })
    .unwrap();
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn baseline_variant_final_equals_baseline_head() {
    let data = generate(&tiny_spec(), 4, 2).unwrap();
    let cfg = TrainConfig { epochs: 2, variant: Variant::Baseline, ..TrainConfig::default() };
    let model = train(&data[..3], 7, &cfg, 1).unwrap().model;
    let results = run_sequences(&model, &data[3..]).unwrap();
    let gts: Vec<&[usize]> = data[3..].iter().map(|s| s.labels.as_slice()).collect();
    let finals: Vec<Vec<usize>> = results.iter().map(SequenceResult::final_preds).collect();
    let bases: Vec<Vec<usize>> = results.iter().map(SequenceResult::baseline_preds).collect();
    assert_eq!(evaluate(&finals, &gts, 7).unwrap(), evaluate(&bases, &gts, 7).unwrap());
    for r in results.iter().flat_map(|r| &r.records) {
        assert_eq!(r.final_dist, r.baseline);
    }
}

#[test]
fn ablation_replays_identically() {
    let data = generate(&tiny_spec(), 5, 3).unwrap();
    let (train_set, test_set) = split(&data, 0.6, 3).unwrap();
    let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
    let a = ablation_run(&train_set, &test_set, 7, &cfg, &[1, 2]).unwrap();
    let b = ablation_run(&train_set, &test_set, 7, &cfg, &[1, 2]).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.rows.len(), 5);
    assert_eq!(a.runs.len(), 10);
    assert!(ablation_run(&train_set, &test_set, 7, &cfg, &[1]).is_err());
}

#[test]
fn external_csv_features_train_like_generated_ones() {
    let spec = tiny_spec();
    let data = generate(&spec, 3, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &data, 7, None, None).unwrap();
    std::fs::remove_file(dir.path().join("manifest.json")).unwrap();
    let (loaded, manifest) = read_dataset(dir.path()).unwrap();
    assert_eq!(loaded, data);
    assert_eq!(manifest.dim, 32);
    let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
    assert_eq!(train(&loaded, 7, &cfg, 0).unwrap(), train(&data, 7, &cfg, 0).unwrap());
}
