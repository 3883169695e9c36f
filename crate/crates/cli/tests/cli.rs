use std::path::Path;
use std::process::{Command, Output};

fn dsted(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsted")).args(args).output().expect("spawn dsted")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_writes_sequences_manifest_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dsted(&["synth", "--out", path(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csvs = std::fs::read_dir(dir.path())
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "csv"))
        .count();
    assert_eq!(csvs, 20);
    assert!(dir.path().join("manifest.json").exists());
    assert!(dir.path().join("config.json").exists());
}

#[test]
fn synth_train_eval_on_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run, ev) = (dir.path().join("data"), dir.path().join("run"), dir.path().join("eval"));
    assert!(dsted(&["synth", "--out", path(&data)]).status.success());
    let out = dsted(&["train", "--data", path(&data), "--out", path(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = run.join("checkpoint.json");
    let out = dsted(&["eval", "--data", path(&data), "--checkpoint", path(&ckpt), "--out", path(&ev)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in
        ["metrics.json", "baseline_metrics.json", "per_class.csv", "confusion.csv", "predictions.csv", "config.json"]
    {
        assert!(ev.join(f).exists(), "missing {f}");
    }
    let preds = std::fs::read_to_string(ev.join("predictions.csv")).unwrap();
    assert!(preds.starts_with("sequence_id,t,gt,baseline_pred,final_pred,g_m,g_u\n"));

    // the resolved config alone reproduces the checkpoint
    let again = dir.path().join("again");
    let cfg = run.join("config.json");
    assert!(dsted(&["train", "--config", path(&cfg), "--data", path(&data), "--out", path(&again)]).status.success());
    assert_eq!(std::fs::read(&ckpt).unwrap(), std::fs::read(again.join("checkpoint.json")).unwrap());
}

#[test]
fn class_count_mismatch_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dsted(&["synth", "--out", path(dir.path()), "--set", "classes=5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("phases"));
}

#[test]
fn dataset_with_other_class_count_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let small = ["--set", "workflow.mean_durations=[20,20,20]", "--set", "workflow.skip_probs=[0,0,0]"];
    let mut args = vec!["synth", "--out", path(&data), "--set", "classes=3", "--set", "workflow.confusable_pairs=[]"];
    args.extend(small);
    assert!(dsted(&args).status.success());
    let out = dsted(&["train", "--data", path(&data), "--out", path(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("o");
    let missing = dir.path().join("nope");
    assert_eq!(dsted(&["train", "--data", path(&missing), "--out", path(&out_dir)]).status.code(), Some(2));
    assert_eq!(dsted(&["synth", "--config", path(&missing), "--out", path(&out_dir)]).status.code(), Some(2));
    assert_eq!(dsted(&["synth", "--out", path(&out_dir), "--set", "train.momentum=0.9"]).status.code(), Some(2));
    assert_eq!(
        dsted(&["synth", "--out", path(&out_dir), "--set", "workflow.confusable_pairs.0.cosine=1.5"]).status.code(),
        Some(2)
    );
    let ckpt = dir.path().join("missing.json");
    assert_eq!(dsted(&["eval", "--checkpoint", path(&ckpt), "--out", path(&out_dir)]).status.code(), Some(2));
    assert_eq!(dsted(&["synth"]).status.code(), Some(2));
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dsted(&[
        "train",
        "--out",
        path(dir.path()),
        "--set",
        "n_sequences=4",
        "--set",
        "train.epochs=2",
        "--set",
        "train.learning_rate=1e300",
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
}
