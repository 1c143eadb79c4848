use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ccd(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ccd"))
        .current_dir(dir)
        .env_remove("CCD_OUTPUT_ROOT")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
}

/// Tiny 32-pixel experiment with one-epoch training.
fn write_config(dir: &Path, extra: serde_json::Value) -> PathBuf {
    let mut cfg = serde_json::json!({
        "data": { "image_size": 32, "synthetic": { "n_train": 12, "n_test_normal": 4, "n_test_abnormal": 5, "anomaly_size_range": [6, 10] } },
        "ccd": { "epochs": 1, "batch_size": 4 },
        "detector": { "epochs": 1 },
        "output_dir": "out",
    });
    for (k, v) in extra.as_object().unwrap() {
        cfg.as_object_mut().unwrap().insert(k.clone(), v.clone());
    }
    let p = dir.join("config.json");
    std::fs::write(&p, cfg.to_string()).unwrap();
    p
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_config(d, serde_json::json!({}));
    for cmd in ["synth-data", "pretrain", "train-detector", "score", "localize", "evaluate"] {
        ok(&ccd(d, &["--config", "config.json", cmd]));
    }
    let out = d.join("out");
    for f in ["data/manifest.json", "pretrained_global.ckpt", "pretrained_local.ckpt", "pretrain_log.jsonl", "detector_global.ckpt", "detector_local.ckpt", "scores.json", "report.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    for sub in ["train", "test", "masks"] {
        assert!(out.join("data").join(sub).is_dir());
    }
    let heat = out.join("heatmaps");
    for ext in ["f32", "json", "png"] {
        assert!(heat.join(format!("test_abnormal_00000.{ext}")).exists());
    }
    assert!(heat.join("test_abnormal_00000_mask.png").exists());

    let report: serde_json::Value = serde_json::from_slice(&read(&out.join("report.json"))).unwrap();
    assert!(report["auroc"].is_number());
    assert!(report["mean_iou"].is_number());
    assert_eq!(report["per_group_iou"].as_array().unwrap().len(), 5);
    assert_eq!(report["config"]["data"]["image_size"], 32);

    let scores: serde_json::Value = serde_json::from_slice(&read(&out.join("scores.json"))).unwrap();
    assert_eq!(scores["scores"].as_array().unwrap().len(), 9);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_config(d, serde_json::json!({ "localisation": { "maps": "global" } }));
    let mut snapshots = Vec::new();
    for _ in 0..2 {
        for cmd in ["synth-data", "pretrain", "train-detector", "score", "localize", "evaluate"] {
            ok(&ccd(d, &["--config", "config.json", "--deterministic", cmd]));
        }
        let out = d.join("out");
        snapshots.push(
            ["data/manifest.json", "pretrained_global.ckpt", "detector_global.ckpt", "scores.json", "report.json", "heatmaps/test_abnormal_00002.f32"]
                .map(|f| read(&out.join(f))),
        );
    }
    assert!(snapshots[0] == snapshots[1]);
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_config(d, serde_json::json!({ "localisation": { "maps": "global" } }));
    let rot = ccd(d, &["--config", "config.json", "--output-dir", "rot", "--strong-family", "rotation", "pretrain"]);
    ok(&rot);
    ok(&ccd(d, &["--config", "config.json", "--output-dir", "perm", "pretrain"]));
    assert_ne!(read(&d.join("rot/pretrained_global.ckpt")), read(&d.join("perm/pretrained_global.ckpt")));
    assert!(!d.join("out").exists());
    let log = String::from_utf8(read(&d.join("rot/pretrain_log.jsonl"))).unwrap();
    assert_eq!(log.lines().count(), 1);
}

#[test]
fn output_root_environment_variable() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_config(d, serde_json::json!({ "localisation": { "maps": "global" } }));
    let root = d.join("root");
    let out = Command::new(env!("CARGO_BIN_EXE_ccd"))
        .current_dir(d)
        .env("CCD_OUTPUT_ROOT", &root)
        .args(["--config", "config.json", "synth-data"])
        .output()
        .unwrap();
    ok(&out);
    assert!(root.join("out/data/manifest.json").exists());
}

#[test]
fn random_init_skips_pretrained_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_config(d, serde_json::json!({}));
    ok(&ccd(d, &["--config", "config.json", "--init", "random", "train-detector", "--scale", "global"]));
    assert!(d.join("out/detector_global.ckpt").exists());
    assert!(!d.join("out/detector_local.ckpt").exists());
    // Pretrained init without checkpoints is a data error.
    assert_eq!(ccd(d, &["--config", "config.json", "train-detector"]).status.code(), Some(3));
}

#[test]
fn checkpoint_arity_mismatch_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_config(d, serde_json::json!({ "localisation": { "maps": "global" } }));
    ok(&ccd(d, &["--config", "config.json", "pretrain"]));
    let out = ccd(d, &["--config", "config.json", "--image-size", "48", "train-detector"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("arity mismatch"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.json"), r#"{"bogus": 1}"#).unwrap();
    assert_eq!(ccd(d, &["--config", "bad.json", "pretrain"]).status.code(), Some(2));
    assert_eq!(ccd(d, &["--config", "missing.json", "pretrain"]).status.code(), Some(2));
    assert_eq!(ccd(d, &["--manifest", "nowhere/manifest.json", "score"]).status.code(), Some(3));
    write_config(d, serde_json::json!({}));
    assert_eq!(ccd(d, &["--config", "config.json", "--batch-size", "0", "pretrain"]).status.code(), Some(2));
    assert_eq!(ccd(d, &["--config", "config.json", "--lr", "1e30", "pretrain"]).status.code(), Some(4));
    assert_eq!(ccd(d, &["--config", "config.json", "sweep", "--axis", "loss_terms", "--values", "nonsense"]).status.code(), Some(2));
}

#[test]
fn single_class_test_set_fails_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_config(
        d,
        serde_json::json!({
            "data": { "image_size": 32, "synthetic": { "n_train": 8, "n_test_normal": 4, "n_test_abnormal": 0, "anomaly_size_range": [6, 10] } },
            "localisation": { "maps": "global" },
        }),
    );
    for cmd in ["pretrain", "train-detector", "score", "localize"] {
        ok(&ccd(d, &["--config", "config.json", cmd]));
    }
    let out = ccd(d, &["--config", "config.json", "evaluate"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("both classes"));
}

#[test]
fn empty_test_set_cannot_be_scored() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_config(
        d,
        serde_json::json!({
            "data": { "image_size": 32, "synthetic": { "n_train": 8, "n_test_normal": 0, "n_test_abnormal": 0, "anomaly_size_range": [6, 10] } },
            "localisation": { "maps": "global" },
        }),
    );
    ok(&ccd(d, &["--config", "config.json", "--init", "random", "train-detector"]));
    assert_eq!(ccd(d, &["--config", "config.json", "score"]).status.code(), Some(3));
}

#[test]
fn sweep_rows_follow_the_values() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_config(d, serde_json::json!({ "localisation": { "maps": "global" } }));
    ok(&ccd(d, &["--config", "config.json", "sweep", "--axis", "batch_size", "--values", "2,4,8", "--jobs", "2"]));
    let table: serde_json::Value = serde_json::from_slice(&read(&d.join("out/sweep.json"))).unwrap();
    let rows = table["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[2]["value"], "8");
    assert!(rows.iter().all(|r| r["auroc"].is_number()));
    ok(&ccd(d, &["--config", "config.json", "sweep", "--axis", "strong_family", "--values", "rotation"]));
}
