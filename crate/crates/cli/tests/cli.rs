// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const STAGES: [&str; 7] = ["fixture", "collect", "train-surrogate", "optimize", "apply", "sweep", "analyze"];

const ARTIFACTS: [&str; 8] = [
    "model.bin",
    "traces.bin",
    "surrogate.bin",
    "mask.json",
    "apply.json",
    "sweep.csv",
    "heatmap.csv",
    "utility.json",
];

/// A scaled-down planted run that finishes in seconds.
fn config_text(steering_lr: f64) -> String {
    format!(
        r#"
[paths]
model = "model.bin"
traces = "traces.bin"
surrogate = "surrogate.bin"
mask = "mask.json"
apply_report = "apply.json"
sweep_csv = "sweep.csv"
heatmap_csv = "heatmap.csv"
utility_report = "utility.json"

[fixture]
layers = 4
experts = 8
top_k = 2
seed = 1

[collect]
prompts_per_class = 80
balance = true
seed = 1

[surrogate]
embed_dim = 8
hidden_dim = 16
epochs = 3
lr = 0.01
batch_size = 32
train_fraction = 0.8
seed = 1

[steering]
target = 1
lambda = 1e-4
tau = 0.1
alpha = 1.0
steps = 60
lr = {steering_lr:e}
optimize_traces = 32
seed = 1

[eval]
flip_prompts = 20
utility_samples = 30
seed = 1

[sweep]
lambdas = [1e-4]
alphas = [0.5, 1.0]
taus = [0.0, 0.5]
tau_fixed = 0.1
collapse_factor = 5.0
"#
    )
}

fn setup(steering_lr: f64) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, config_text(steering_lr)).unwrap();
    (dir, cfg)
}

fn moesteer(cfg: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moesteer"))
        .arg("--config")
        .arg(cfg)
        .args(args)
        .output()
        .unwrap()
}

fn ok(cfg: &Path, args: &[&str]) {
    let out = moesteer(cfg, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn exit_code(cfg: &Path, args: &[&str]) -> i32 {
    moesteer(cfg, args).status.code().expect("exited normally")
}

fn run_pipeline(cfg: &Path) {
    for stage in STAGES {
        ok(cfg, &[stage]);
    }
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Manifest content that must not depend on where or when the run happened.
fn stable_manifest(path: &Path) -> Value {
    let mut m = json(path);
    let obj = m.as_object_mut().unwrap();
    obj.remove("created");
    let digest = |v: &Value| v["sha256"].clone();
    let inputs: Vec<Value> = obj["inputs"].as_array().unwrap().iter().map(digest).collect();
    obj.insert("inputs".into(), Value::Array(inputs));
    let output = digest(&obj["output"]);
    obj.insert("output".into(), output);
    m
}

#[test]
fn full_pipeline_writes_every_artifact_with_a_manifest() {
    let (dir, cfg) = setup(0.01);
    run_pipeline(&cfg);
    for name in ARTIFACTS {
        let path = dir.path().join(name);
        assert!(path.is_file(), "{name} missing");
        let manifest = json(&dir.path().join(format!("{name}.manifest.json")));
        assert_eq!(manifest["output"]["sha256"].as_str().unwrap().len(), 64);
        assert!(manifest["seeds"].is_object());
    }
    let sweep = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    // Two grid cells, two τ cells and the collapse probe.
    assert_eq!(sweep.lines().count(), 1 + 5);
}

#[test]
fn reruns_are_byte_identical_apart_from_timestamps() {
    let (dir, cfg) = setup(0.01);
    let snapshot = || -> Vec<(Vec<u8>, Value)> {
        ARTIFACTS
            .iter()
            .map(|name| {
                let manifest = dir.path().join(format!("{name}.manifest.json"));
                (fs::read(dir.path().join(name)).unwrap(), stable_manifest(&manifest))
            })
            .collect()
    };
    run_pipeline(&cfg);
    let first = snapshot();
    for name in ARTIFACTS {
        fs::remove_file(dir.path().join(name)).unwrap();
    }
    run_pipeline(&cfg);
    for (name, (a, b)) in ARTIFACTS.iter().zip(first.iter().zip(snapshot())) {
        assert_eq!(a.0, b.0, "{name} differs");
        assert_eq!(a.1, b.1, "manifest of {name} differs");
    }
}

#[test]
fn sweep_does_not_depend_on_thread_count() {
    let (dir, cfg) = setup(0.01);
    for stage in &STAGES[..4] {
        ok(&cfg, &[stage]);
    }
    ok(&cfg, &["sweep", "--jobs", "1"]);
    let one = fs::read(dir.path().join("sweep.csv")).unwrap();
    ok(&cfg, &["sweep", "--jobs", "3"]);
    assert_eq!(fs::read(dir.path().join("sweep.csv")).unwrap(), one);
}

#[test]
fn zero_alpha_reproduces_the_baseline() {
    let (dir, cfg) = setup(0.01);
    for stage in &STAGES[..4] {
        ok(&cfg, &[stage]);
    }
    ok(&cfg, &["apply", "--alpha", "0"]);
    let report = json(&dir.path().join("apply.json"));
    assert_eq!(report["alpha"], 0.0);
    assert_eq!(report["steered"], report["baseline"]);
    assert_eq!(report["utility"]["decline"], 0.0);
}

#[test]
fn seed_flag_overrides_the_config() {
    let (dir, cfg) = setup(0.01);
    ok(&cfg, &["fixture"]);
    let base = fs::read(dir.path().join("model.bin")).unwrap();
    ok(&cfg, &["--seed", "7", "fixture"]);
    assert_ne!(fs::read(dir.path().join("model.bin")).unwrap(), base);
    let manifest = json(&dir.path().join("model.bin.manifest.json"));
    assert_eq!(manifest["seeds"]["fixture"], 7);
}

#[test]
fn missing_input_exits_with_2() {
    let (_dir, cfg) = setup(0.01);
    assert_eq!(exit_code(&cfg, &["collect"]), 2);
    let absent = cfg.with_file_name("absent.toml");
    assert_eq!(exit_code(&absent, &["fixture"]), 2);
}

#[test]
fn format_errors_exit_with_3() {
    let (dir, cfg) = setup(0.01);
    ok(&cfg, &["fixture"]);
    let model = dir.path().join("model.bin");
    let mut bytes = fs::read(&model).unwrap();
    bytes[0] ^= 0xFF;
    fs::write(&model, bytes).unwrap();
    assert_eq!(exit_code(&cfg, &["collect"]), 3);

    fs::write(&cfg, config_text(0.01).replace("[sweep]", "[sweep]\nbogus = 1")).unwrap();
    assert_eq!(exit_code(&cfg, &["fixture"]), 3);
}

#[test]
fn numeric_failure_exits_with_4() {
    // An absurd step size overflows the steering matrix.
    let (dir, cfg) = setup(1e308);
    for stage in &STAGES[..3] {
        ok(&cfg, &[stage]);
    }
    let out = moesteer(&cfg, &["optimize"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!dir.path().join("mask.json").exists());
}
