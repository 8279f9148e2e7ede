use std::path::Path;

use protomargin::config::{describe_keys, RunConfig, KEY_DOCS};
use protomargin::pipeline::{checkpoint_path, eval_run, explain_run, generate, train_run, ExplainTarget, RUN_MANIFEST};
use protomargin::synthgen::{manifest_sha256, read_dataset, Split};

fn small_config(root: &Path) -> RunConfig {
    let mut cfg = RunConfig::from_json_str(
        r#"{
            "dataset.samples_per_class": [8, 8, 8],
            "dataset.image_size": 48,
            "dataset.split": [15, 3, 6],
            "dataset.fine_annotated": 3,
            "model.block_channels": [4, 6, 8],
            "model.latent_channels": 8,
            "model.prototypes_per_class": 2,
            "model.k": 3,
            "train.epochs_per_cycle": 1,
            "train.max_cycles": 1,
            "train.a3_steps": 10,
            "train.b_steps": 100,
            "eval.resamples": 100
        }"#,
    )
    .unwrap();
    cfg.dataset.dir = root.join("data");
    cfg.out = root.join("run");
    cfg
}

#[test]
fn config_round_trips_and_rejects_unknown_keys() {
    let cfg = RunConfig::default();
    assert_eq!(RunConfig::from_json_str(&cfg.to_json_string()).unwrap(), cfg);
    let custom = RunConfig::from_json_str(r#"{"seed": 9, "train.fine_normalization": "pixels"}"#).unwrap();
    assert_eq!(RunConfig::from_json_str(&custom.to_json_string()).unwrap(), custom);
    assert_eq!(custom.train.seed, 9);
    assert_eq!(custom.eval.seed, 9);
    for bad in [
        r#"{"train.lamda_f": 1}"#,
        r#"{"train.seed": 3}"#,
        r#"{"train": {"lambda_f": 1}}"#,
        r#"{"model.k": "five"}"#,
        "[1, 2]",
        "not json",
    ] {
        assert!(RunConfig::from_json_str(bad).is_err(), "{bad}");
    }
}

#[test]
fn every_key_is_documented_with_its_default() {
    let flat = RunConfig::default().to_flat();
    let documented: Vec<&str> = KEY_DOCS.iter().map(|(k, _)| *k).collect();
    let mut keys: Vec<&str> = flat.keys().map(|k| k.as_str()).collect();
    keys.sort();
    let mut sorted = documented.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
    let help = describe_keys();
    for k in documented {
        assert!(help.contains(k));
    }
    assert!(help.contains("[default: 0.001]"));
}

#[test]
fn default_dataset_split_sizes() {
    let cfg = RunConfig::default();
    assert_eq!(cfg.dataset.split, [600, 100, 125]);
    assert_eq!(cfg.dataset.samples_per_class.iter().sum::<usize>(), 825);
    assert_eq!(cfg.dataset.fine_annotated, 30);
    cfg.validate().unwrap();
    let mut bad = cfg.clone();
    bad.dataset.split = [600, 100, 100];
    assert!(bad.validate().is_err());
}

#[test]
fn generate_train_eval_explain_end_to_end() {
    let root = tempfile::tempdir().unwrap();
    let cfg = small_config(root.path());
    let manifest = generate(&cfg).unwrap();
    assert_eq!(
        (manifest.count(Split::Train), manifest.count(Split::Val), manifest.count(Split::Test)),
        (15, 3, 6)
    );
    assert_eq!(manifest.fine_train_count(), 3);

    train_run(&cfg, &|_| {}).unwrap();
    let run_manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(cfg.out.join(RUN_MANIFEST)).unwrap()).unwrap();
    assert_eq!(
        run_manifest["dataset_manifest_sha256"].as_str().unwrap(),
        manifest_sha256(&cfg.dataset.dir).unwrap()
    );
    let ckpt = checkpoint_path(&cfg, None);
    assert!(ckpt.exists());

    let report = eval_run(&cfg, &ckpt, Split::Test, &cfg.out).unwrap();
    assert_eq!(report.samples, 6);
    assert!(cfg.out.join("eval_test.json").exists());
    assert!(cfg.out.join("eval_test.csv").exists());

    let ex = cfg.out.join("explain");
    let one = read_dataset(&cfg.dataset.dir).unwrap().split(Split::Test)[0].id.clone();
    let img = cfg.dataset.dir.join("test").join(format!("{one}.pgm"));
    let s = explain_run(&cfg, &ckpt, Some(&ExplainTarget::Image(img)), true, &ex).unwrap();
    assert_eq!(s.reports.len(), 1);
    assert!(s.gallery.is_some());
    let s = explain_run(&cfg, &ckpt, Some(&ExplainTarget::Split(Split::Test)), false, &ex).unwrap();
    assert_eq!(s.reports.len(), 6);
    let bad = explain_run(&cfg, &ckpt, Some(&ExplainTarget::Image(root.path().join("nope.pgm"))), false, &ex);
    assert!(bad.is_err());
}

#[test]
fn identical_config_gives_identical_artifacts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for root in [a.path(), b.path()] {
        let cfg = small_config(root);
        generate(&cfg).unwrap();
        train_run(&cfg, &|_| {}).unwrap();
        eval_run(&cfg, &checkpoint_path(&cfg, None), Split::Test, &cfg.out).unwrap();
        outputs.push((
            manifest_sha256(&cfg.dataset.dir).unwrap(),
            std::fs::read(cfg.out.join("final.ckpt")).unwrap(),
            std::fs::read(cfg.out.join("eval_test.json")).unwrap(),
            std::fs::read(cfg.out.join("train_log.csv")).unwrap(),
        ));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn missing_dataset_is_an_error() {
    let root = tempfile::tempdir().unwrap();
    let cfg = small_config(root.path());
    assert!(train_run(&cfg, &|_| {}).is_err());
}
