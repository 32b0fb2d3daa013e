//! Drives the binary on tiny configs and checks the files each subcommand
//! leaves behind.

use std::path::Path;
use std::process::Command;

use serde_json::{json, Value};

const TINY: &str = r#"{
    "synth": {"n_clean": 8, "n_adversarial": 8, "attacks": ["fgsm"]},
    "evaluation": {"seeds": [0, 1], "calibration_fraction": 0.5},
    "sweep": {"n_encoders": [1, 10], "otu_scales": [0.0]},
    "clean_ratios": [0.5],
    "adapter": {"n_images": 64, "train": {"epochs": 2}},
    "adaptive": {
        "attack": {"budget": {"epsilon": 0.03137254901960784, "steps": 3, "step_size": 0.00392156862745098, "norm": "LINF"}},
        "seeds": [0], "n_pairs": 2, "n_calibration": 4,
        "grid": [{"kind": "stochastic", "n_encoders": 1, "otu_scale": 0.0}]
    }
}"#;

fn run(dir: &Path, args: &[&str]) -> String {
    let config = dir.join("config.json");
    if !config.exists() {
        std::fs::write(&config, TINY).unwrap();
    }
    let out = Command::new(env!("CARGO_BIN_EXE_regen-detect"))
        .arg("--config")
        .arg(&config)
        .arg("--out-dir")
        .arg(dir.join("out"))
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn meta(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("out/run_meta.json")).unwrap()).unwrap()
}

#[test]
fn config_errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"evaluation": {"seeds": []}}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_regen-detect"))
        .args(["--config", bad.to_str().unwrap(), "evaluate"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("invalid config"));
}

#[test]
fn evaluate_and_sweep_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = run(dir.path(), &["evaluate"]);
    assert!(stdout.contains("accuracy"));
    let m = meta(dir.path());
    assert_eq!(m["command"], "evaluate");
    assert_eq!(m["seeds"], json!([0, 1]));
    assert!(dir.path().join("out/verdicts.jsonl").exists());
    assert!(dir.path().join("out/summary.csv").exists());

    run(dir.path(), &["sweep"]);
    assert_eq!(meta(dir.path())["cells"].as_array().unwrap().len(), 2);
}

#[test]
fn attack_then_calibrate_then_detect_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    run(dir.path(), &["attack"]);
    let manifest = dir.path().join("out/dataset/manifest.json");
    let entries: Value = serde_json::from_str(&std::fs::read_to_string(&manifest).unwrap()).unwrap();
    assert_eq!(entries["entries"].as_array().unwrap().len(), 16);
    let records = std::fs::read_to_string(dir.path().join("out/dataset/attacks.jsonl")).unwrap();
    let records: Vec<Value> = records.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 8);
    assert!(records.iter().all(|r| r["attack_name"] == "FGSM" && r["linf"].as_f64().unwrap() <= r["budget"]["epsilon"].as_f64().unwrap() + 1e-12));

    let mut cfg: Value = serde_json::from_str(TINY).unwrap();
    cfg["dataset"] = json!(manifest);
    std::fs::write(dir.path().join("config.json"), cfg.to_string()).unwrap();
    run(dir.path(), &["calibrate", "--per-attack"]);
    let per: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/calibration_per_attack.json")).unwrap()).unwrap();
    assert!(per["FGSM"]["threshold"].is_f64());
    let cal = dir.path().join("out/calibration.json");
    let threshold = serde_json::from_str::<Value>(&std::fs::read_to_string(&cal).unwrap()).unwrap()["threshold"]
        .as_f64()
        .unwrap();
    assert!(threshold > 0.0 && threshold < 1.0);

    let image = dir.path().join("out/dataset/clean-00000.png");
    let verdict: Value = serde_json::from_str(&run(dir.path(), &["detect", image.to_str().unwrap(), "--calibration", cal.to_str().unwrap()])).unwrap();
    assert_eq!(verdict["label"], "CLEAN");
    assert_eq!(verdict["threshold"].as_f64().unwrap(), threshold);

    let first = dir.path().join("first");
    std::fs::rename(dir.path().join("out/dataset"), &first).unwrap();
    cfg["dataset"] = json!(first.join("manifest.json"));
    std::fs::write(dir.path().join("config.json"), cfg.to_string()).unwrap();
    run(dir.path(), &["attack"]);
    let again: Value = serde_json::from_str(&std::fs::read_to_string(&manifest).unwrap()).unwrap();
    let ids: Vec<&str> = again["entries"].as_array().unwrap().iter().map(|e| e["image_id"].as_str().unwrap()).collect();
    assert_eq!(ids.len(), 24);
    assert!(ids.contains(&"clean-00000-adv"));

    run(dir.path(), &["clean-ratio", "--seed", "5"]);
    let csv = std::fs::read_to_string(dir.path().join("out/clean_ratio.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.starts_with("5,")));
}

#[test]
fn adapter_round_trips_into_adaptive_eval() {
    let dir = tempfile::tempdir().unwrap();
    run(dir.path(), &["train-adapter"]);
    assert!(dir.path().join("out/adapter.bin").exists());
    let adapter = dir.path().join("out/adapter");
    run(dir.path(), &["adaptive-eval", "--adapter", adapter.to_str().unwrap()]);
    let table: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/adaptive.json")).unwrap()).unwrap();
    let acc = table["cells"][0]["accuracy_mean"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(meta(dir.path())["command"], "adaptive-eval");
}
