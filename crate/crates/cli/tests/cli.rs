use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use vlpert_core::TrainConfig;

fn vlpert(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vlpert"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("ARTIFACT_DATA_DIR")
        .output()
        .expect("spawn vlpert")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn perturb_writes_nine_variants_per_line() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("reports.txt");
    std::fs::write(&input, "The lungs are clear. There is no pleural effusion or pneumothorax.\nheart size is normal\n").unwrap();
    let out = vlpert(&["perturb", "--in", arg(&input), "--seed", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<Value> = stdout.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["original"], "the lungs are clear there is no pleural effusion or pneumothorax");
    let variants = lines[0]["variants"].as_array().unwrap();
    assert_eq!(variants.len(), 9);
    assert!(variants.iter().any(|v| v.to_string().contains("pneumothorax or effusion pleural no is there clear are lungs the")));

    let again = vlpert(&["perturb", "--in", arg(&input), "--seed", "3"]);
    assert_eq!(stdout, String::from_utf8(again.stdout).unwrap());

    let run = dir.path().join("run");
    let out = vlpert(&["perturb", "--in", arg(&input), "--seed", "3", "--out", arg(&run)]);
    assert!(out.status.success());
    assert_eq!(std::fs::read_to_string(run.join("perturbations.jsonl")).unwrap(), stdout);
    assert_eq!(read_json(&run.join("manifest.json"))["subcommand"], "perturb");
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(vlpert(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(vlpert(&["train", "--config", "/nonexistent/config.json"]).status.code(), Some(1));
    assert_eq!(vlpert(&["train", "--lr", "not-a-number"]).status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(&config, r#"{"bogus.key": 1}"#).unwrap();
    assert_eq!(vlpert(&["train", "--config", arg(&config)]).status.code(), Some(1));
    assert_eq!(vlpert(&["--help"]).status.code(), Some(0));
}

#[test]
fn gradcheck_passes_with_default_instances() {
    let dir = tempfile::tempdir().unwrap();
    let out = vlpert(&["gradcheck", "--seeds", "50", "--out", arg(dir.path())]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = read_json(&dir.path().join("results.json"));
    let cases = report["cases"].as_array().unwrap();
    assert!(!cases.is_empty());
    assert!(cases.iter().all(|c| c["instances"].as_u64().unwrap() >= 50));
    assert!(dir.path().join("results.csv").exists());
}

#[test]
fn help_defaults_match_the_library() {
    let out = vlpert(&["train", "--help"]);
    assert!(out.status.success());
    let help = String::from_utf8(out.stdout).unwrap();
    let d = TrainConfig::default();
    for expected in [
        format!("[default: {}]", d.epochs),
        format!("[default: {}]", d.weights.alpha),
        format!("[default: {}]", d.weights.beta),
        format!("[default: {}]", d.weights.tau),
        format!("[default: {}]", d.batch_size),
        format!("[default: {}]", d.lr),
        format!("[default: {}]", d.momentum),
        format!("[default: {}]", d.weight_decay),
    ] {
        assert!(help.contains(&expected), "missing {expected} in\n{help}");
    }
}

fn gen_data(dir: &Path, n: usize, seed: u64) -> std::path::PathBuf {
    let data = dir.join(format!("data-{seed}"));
    let out = vlpert(&["gen-data", "--n", &n.to_string(), "--seed", &seed.to_string(), "--out", arg(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    data
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path(), 16, 1);
    let config = dir.path().join("config.json");
    std::fs::write(&config, r#"{"epochs": 1, "batch_size": 8, "lr": 0.5, "weights.beta": 0.3}"#).unwrap();
    let run = dir.path().join("run");
    let out = vlpert(&["train", "--config", arg(&config), "--corpus", arg(&data), "--out", arg(&run), "--lr", "0.01"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let resolved = read_json(&run.join("config.json"));
    assert_eq!(resolved["lr"], 0.01);
    assert_eq!(resolved["batch_size"], 8);
    assert_eq!(resolved["weights.beta"], 0.3);
    assert_eq!(resolved["weights.alpha"], TrainConfig::default().weights.alpha);
    let manifest = read_json(&run.join("manifest.json"));
    assert_eq!(manifest["config"], resolved);
    assert_eq!(manifest["subcommand"], "train");
}

#[test]
fn generate_train_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path(), 24, 2);
    assert!(data.join("manifest.json").exists());
    let run = dir.path().join("run");
    let out = vlpert(&[
        "train", "--corpus", arg(&data), "--out", arg(&run), "--epochs", "3", "--batch-size", "8", "--lr", "0.01",
        "--checkpoint-every", "2", "--seed", "4",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3 * 3);
    assert!(run.join("model.json").exists());
    assert!(run.join("checkpoints/epoch_0002.json").exists());
    assert_eq!(read_json(&run.join("results.json"))["epochs_completed"], 3);

    // resuming from epoch 2 reproduces the uninterrupted metric stream
    let resumed = dir.path().join("resumed");
    std::fs::create_dir_all(&resumed).unwrap();
    let head: String = metrics.lines().take(6).map(|l| format!("{l}\n")).collect();
    std::fs::write(resumed.join("metrics.jsonl"), head).unwrap();
    let ckpt = run.join("checkpoints/epoch_0002.json");
    let out = vlpert(&["train", "--resume", arg(&ckpt), "--out", arg(&resumed)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(resumed.join("metrics.jsonl")).unwrap(), metrics);

    let s = dir.path().join("structure");
    let out = vlpert(&["eval-structure", "--model", arg(&run), "--corpus", arg(&data), "--out", arg(&s)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let acc = read_json(&s.join("results.json"))["result"]["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let r = dir.path().join("retrieval");
    let out = vlpert(&["eval-retrieval", "--model", arg(&run), "--corpus", arg(&data), "--k", "1,5", "--out", arg(&r)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(r.join("results.csv").exists());

    let p = dir.path().join("probe");
    let out = vlpert(&["probe", "--model", arg(&run), "--corpus", arg(&data), "--epochs", "20", "--out", arg(&p)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(p.join("results.json").exists());

    let missing = vlpert(&["eval-structure", "--model", arg(&dir.path().join("nope")), "--corpus", arg(&data)]);
    assert_ne!(missing.status.code(), Some(0));
}

#[test]
fn manifest_replay_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path(), 16, 9);
    let first = dir.path().join("a");
    let out = vlpert(&["train", "--corpus", arg(&data), "--out", arg(&first), "--epochs", "2", "--batch-size", "8"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    // replay the recorded resolved config into a second run directory
    let manifest = read_json(&first.join("manifest.json"));
    let config = dir.path().join("replay.json");
    std::fs::write(&config, manifest["config"].to_string()).unwrap();
    let second = dir.path().join("b");
    let out = vlpert(&["train", "--config", arg(&config), "--out", arg(&second)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        std::fs::read_to_string(first.join("metrics.jsonl")).unwrap(),
        std::fs::read_to_string(second.join("metrics.jsonl")).unwrap()
    );
    assert_eq!(std::fs::read(first.join("model.json")).unwrap(), std::fs::read(second.join("model.json")).unwrap());
    assert_eq!(read_json(&second.join("manifest.json"))["seeds"], manifest["seeds"]);
}
