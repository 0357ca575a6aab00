use std::path::Path;
use std::process::{Command, Output};

fn cmb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmb")).args(args).output().expect("binary runs")
}

fn json_lines(out: &Output) -> Vec<serde_json::Value> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).expect("one JSON object per line"))
        .collect()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn verify_properties_reports_every_check() {
    let out = cmb(&["verify", "--suite", "properties"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let lines = json_lines(&out);
    assert_eq!(lines.len(), 6);
    for l in &lines {
        assert_eq!(l["status"], "pass");
        for key in ["name", "metric", "tolerance"] {
            assert!(l.get(key).is_some(), "missing {key} in {l}");
        }
    }
}

#[test]
fn tampered_psi_fails_verification() {
    let out = cmb(&["verify", "--suite", "invertibility", "--tamper-psi"]);
    assert_eq!(out.status.code(), Some(1));
    let lines = json_lines(&out);
    assert_eq!(lines.len(), 1);
    assert_eq!(lines[0]["status"], "fail");
}

#[test]
fn unknown_suite_is_rejected() {
    let out = cmb(&["verify", "--suite", "nope"]);
    assert!(!out.status.success());
}

#[test]
fn generate_train_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let ckpt = dir.path().join("ckpt");
    let small = ["--set", "image_size=32", "--set", "decoder_channels=4", "--batch", "4"];

    let mut args = vec!["gen-data", "--out", path(&data), "--n", "8", "--seed", "3"];
    args.extend(small);
    let out = cmb(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json_lines(&out)[0]["matched"], 4);

    let train = |ckpt: &Path| {
        let mut args = vec!["train", "--data", path(&data), "--out", path(ckpt), "--epochs", "1", "--seed", "5"];
        args.extend(small);
        let out = cmb(&args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::read_to_string(ckpt.join("metrics.jsonl")).unwrap()
    };
    let log = train(&ckpt);
    assert_eq!(log, train(&dir.path().join("again")), "seeded runs must be reproducible");

    let preds = dir.path().join("preds");
    let out = cmb(&["eval", "--checkpoint", path(&ckpt), "--data", path(&data), "--predictions", path(&preds)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = &json_lines(&out)[0];
    assert_eq!(report["images"], 8);
    assert_eq!(report["ablation"], "FULL");
    for key in ["f1", "iou"] {
        let v = report[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }
    assert_eq!(std::fs::read_dir(&preds).unwrap().count(), 8);

    let out = cmb(&["eval", "--checkpoint", path(&ckpt), "--data", path(&data), "--threshold", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
}
