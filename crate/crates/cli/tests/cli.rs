//! Drives the binary through generate, train, infer, oracle, sweep and
//! evaluate on a tiny collection.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const CONFIG: &str = r#"
methods = ["naive", "svm_oracle", "cina_zs"]
seed = 3

[generator]
kind = "sim_a"
n_datasets = 6
units_per_dataset = 24
eta_prior = "shared_prior"

[train_config]
lambda_min = 1e-3
lambda_max = 1e-2
grid_size = 2
lr_max = 1e-3
lr_min = 1e-5
epochs = 5
optimizer = "adam"
beta0_lr_ratio = 1.0

[single_config]
lambda_min = 1e-2
lambda_max = 1e-2
grid_size = 1
lr_max = 1.0
lr_min = 1e-4
epochs = 20
"#;

fn cina(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_cina")).args(args).env("CINA_THREADS", "1").output().unwrap();
    assert!(
        out.status.success(),
        "cina {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json_file(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("exp.toml");
    std::fs::write(&cfg, CONFIG).unwrap();
    let cfg = cfg.to_str().unwrap();
    let path = |p: &str| tmp.path().join(p).to_str().unwrap().to_owned();

    cina(&["generate", "--config", cfg, "--out", &path("data")]);
    let manifest = path("data/manifest.json");
    assert!(Path::new(&manifest).exists());

    cina(&["train", "--config", cfg, "--data", &manifest, "--mode", "multi", "--out", &path("multi")]);
    assert!(tmp.path().join("multi/run_log.jsonl").exists());
    let ckpt = path("multi/checkpoint.json");

    let infer = cina(&["infer", "--checkpoint", &ckpt, "--data", &manifest]);
    let v: Value = serde_json::from_slice(&infer.stdout).unwrap();
    let results = v["results"].as_array().unwrap();
    assert_eq!(results.len(), 6);
    assert!(results.iter().all(|r| r["ate"].as_f64().unwrap().is_finite()));

    let ite = cina(&["infer", "--oracle", "--data", &manifest, "--ite", "--unit", "1", "--k", "3"]);
    let v: Value = serde_json::from_slice(&ite.stdout).unwrap();
    assert!(v["results"][0]["ite"].is_object() || v["results"][0]["ite"].is_number());

    cina(&["oracle", "--data", &manifest, "--lambdas", "0.01,0.1", "--out", &path("oracle")]);
    let o = json_file(&tmp.path().join("oracle/oracle.json"));
    let first = &o["results"][0];
    let sum: f64 = first["alpha"]["data"].as_array().unwrap().iter().map(|a| a.as_f64().unwrap()).sum();
    assert!((sum - 2.0).abs() < 1e-6, "treated and control weights each sum to one, got {sum}");
    assert!(first["dual_sweep"]["best_lambda"].is_number());

    cina(&["train", "--config", cfg, "--data", &manifest, "--mode", "single", "--out", &path("single")]);
    cina(&["sweep", "--config", cfg, "--data", &manifest, "--out", &path("sweep")]);
    assert!(json_file(&tmp.path().join("sweep/sweep.json"))["best_lambda"].is_number());

    let eval = cina(&["evaluate", "--config", cfg, "--baselines", "ipw", "--out", &path("eval")]);
    let csv = String::from_utf8(eval.stdout).unwrap();
    assert!(csv.starts_with("method,mae,se,mean_wall_time_s"));
    for m in ["naive", "svm_oracle", "cina_zs", "ipw"] {
        assert!(csv.lines().any(|l| l.starts_with(m)), "{m} missing from\n{csv}");
    }
    let report = json_file(&tmp.path().join("eval/report.json"));
    assert_eq!(report["metadata"]["seed"], 3);
}

#[test]
fn missing_config_is_an_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_cina")).args(["generate"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--config"));
}

#[test]
fn bad_thread_count_is_an_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_cina"))
        .args(["generate"])
        .env("CINA_THREADS", "0")
        .output()
        .unwrap();
    assert!(!out.status.success());
}
