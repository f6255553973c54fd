use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn candide(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_candide"))
        .args(args)
        .arg("--quiet")
        .current_dir(dir)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = candide(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn trained_mlp_fits_its_training_data_and_eval_agrees() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--seed", "5", "--out", "data"]);
    ok(d, &["fit", "--input", "data/train.csv", "--mode", "action", "--out", "fit"]);
    ok(d, &["extract", "--kind", "au8", "--input", "fit/fits.jsonl", "--out", "feat"]);
    ok(d, &["train", "--features", "feat/features.csv", "--classifier", "mlp", "--out", "mlp"]);
    ok(d, &["eval", "--weights", "mlp/model.json", "--features", "feat/features.csv", "--out", "eval"]);

    let log = json(&d.join("mlp/training_log.json"));
    let train_acc = log["final_train_accuracy"].as_f64().unwrap();
    assert!(train_acc >= 0.9, "training accuracy {train_acc}");
    let report = json(&d.join("eval/report.json"));
    assert_eq!(report["accuracy"].as_f64().unwrap(), train_acc);

    // kappa from the reported confusion matrix
    let cm: Vec<Vec<f64>> = report["confusion"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r.as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect())
        .collect();
    let n: f64 = cm.iter().flatten().sum();
    let p_o = (0..4).map(|k| cm[k][k]).sum::<f64>() / n;
    let p_e: f64 = (0..4)
        .map(|k| cm[k].iter().sum::<f64>() / n * cm.iter().map(|r| r[k]).sum::<f64>() / n)
        .sum();
    let kappa = report["kappa"].as_f64().unwrap();
    assert!((kappa - (p_o - p_e) / (1.0 - p_e)).abs() < 1e-12);
}

#[test]
fn noiseless_action_fit_reprojects_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(
        d,
        &["synth", "--n-per-class", "5", "--noise-sigma", "0", "--no-augment", "--out", "data"],
    );
    ok(d, &["fit", "--input", "data/train.csv", "--mode", "action", "--out", "fit"]);
    let text = std::fs::read_to_string(d.join("fit/fits.jsonl")).unwrap();
    let mut n = 0;
    for line in text.lines() {
        let rmse = serde_json::from_str::<Value>(line).unwrap()["rmse"].as_f64().unwrap();
        assert!(rmse <= 1e-6, "rmse {rmse}");
        n += 1;
    }
    assert_eq!(n, 20);
}

#[test]
fn synth_manifest_records_test_yaw() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--n-per-class", "3", "--test-yaw", "0.3", "--seed", "9", "--out", "data"]);
    let m = json(&d.join("data/manifest.json"));
    assert_eq!(m["command"], "synth");
    assert_eq!(m["seed"], 9);
    assert_eq!(m["config"]["test_yaws"], serde_json::json!([0.3]));
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn personalize_rejects_a_single_frame() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--n-per-class", "1", "--out", "data"]);
    let csv = std::fs::read_to_string(d.join("data/train.csv")).unwrap();
    let one: Vec<&str> = csv.lines().take(2).collect();
    std::fs::write(d.join("one.csv"), one.join("\n") + "\n").unwrap();
    let out = candide(d, &["personalize", "--input", "one.csv", "--out", "p"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("insufficient frames"));
}

#[test]
fn usage_errors_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = candide(d, &["train", "--features", "missing.csv", "--classifier", "forest"]);
    assert_eq!(out.status.code(), Some(2));
    let out = candide(d, &["fit", "--input", "missing.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.csv"));
}
