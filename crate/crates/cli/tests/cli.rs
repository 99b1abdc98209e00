use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const STAGES: [&str; 6] = ["prepare-data", "train-classifier", "fit-gaussian", "construct-ood", "train-rejection", "evaluate"];

fn tiny_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/tiny.toml")
}

fn poe(config: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_poe"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "info")
        .output()
        .expect("spawn poe")
}

fn ok(config: &Path, out: &Path, args: &[&str]) -> Output {
    let o = poe(config, out, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn run_pipeline(config: &Path, out: &Path) {
    for s in STAGES {
        ok(config, out, &[s]);
    }
}

/// The last stderr line must be a single JSON object naming the error kind.
fn error_kind(o: &Output) -> String {
    assert!(!o.status.success());
    let stderr = String::from_utf8_lossy(&o.stderr);
    let line = stderr.lines().last().expect("error line");
    let v: Value = serde_json::from_str(line).unwrap_or_else(|e| panic!("not JSON ({e}): {line}"));
    assert!(v["message"].is_string());
    v["error"].as_str().expect("error kind").to_string()
}

#[test]
fn full_pipeline_writes_report_table() {
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(&tiny_config(), dir.path());
    let summary = std::fs::read_to_string(dir.path().join("summary.md")).unwrap();
    for row in ["ce+msp", "ce+maha", "poe+maha", "ce+react*", "ce+dice*"] {
        assert!(summary.contains(&format!("| {row} |")), "missing {row} in\n{summary}");
    }
    let reports: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("reports.json")).unwrap()).unwrap();
    assert_eq!(reports["payload"].as_array().unwrap().len(), 8);
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    for stage in ["corpus", "classifier", "ce_stats", "surrogates", "rejection", "poe_stats", "reports"] {
        assert!(manifest["stages"][stage]["sha256"].is_string(), "stage {stage} not recorded");
    }
}

#[test]
fn shipped_config_runs_end_to_end() {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic.toml");
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(&config, dir.path());
    let summary = std::fs::read_to_string(dir.path().join("summary.md")).unwrap();
    assert!(summary.contains("| poe+maha |") && summary.contains("| ce+odin* |"));
}

#[test]
fn random_construction_with_same_seed_is_identical() {
    let config = tiny_config();
    let mut files = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        for s in ["prepare-data", "train-classifier", "fit-gaussian"] {
            ok(&config, dir.path(), &[s, "--seed", "7"]);
        }
        ok(&config, dir.path(), &["construct-ood", "--strategy", "random", "--seed", "7"]);
        files.push(std::fs::read(dir.path().join("surrogates.jsonl")).unwrap());
    }
    assert!(!files[0].is_empty());
    assert_eq!(files[0], files[1]);
}

#[test]
fn rerunning_a_stage_is_idempotent() {
    let config = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    for s in ["prepare-data", "train-classifier", "fit-gaussian", "construct-ood"] {
        ok(&config, dir.path(), &[s]);
    }
    let first = std::fs::read(dir.path().join("surrogates.jsonl")).unwrap();
    let first_ck = std::fs::read(dir.path().join("classifier.json")).unwrap();
    ok(&config, dir.path(), &["train-classifier"]);
    ok(&config, dir.path(), &["fit-gaussian"]);
    ok(&config, dir.path(), &["construct-ood"]);
    assert_eq!(first_ck, std::fs::read(dir.path().join("classifier.json")).unwrap());
    assert_eq!(first, std::fs::read(dir.path().join("surrogates.jsonl")).unwrap());
}

#[test]
fn evaluate_reuses_cached_score_sets() {
    let config = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(&config, dir.path());
    let before = std::fs::read(dir.path().join("reports.json")).unwrap();
    let o = ok(&config, dir.path(), &["evaluate"]);
    let log = String::from_utf8_lossy(&o.stderr);
    assert!(log.contains("reusing cached score set"), "{log}");
    assert!(!log.contains("scoring scores/"), "recomputed a score set:\n{log}");
    assert_eq!(before, std::fs::read(dir.path().join("reports.json")).unwrap());
}

#[test]
fn score_command_prints_a_report() {
    let config = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(&config, dir.path());
    let o = ok(&config, dir.path(), &["score", "--rule", "odin", "--network", "ce", "--temperature", "2", "--epsilon", "0.01"]);
    let report: Value = serde_json::from_str(String::from_utf8_lossy(&o.stdout).trim()).unwrap();
    assert_eq!(report["rule"], "odin");
    assert_eq!(report["method"], "ce");
    let auroc = report["auroc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auroc));
    assert!(dir.path().join("scores/ce").read_dir().unwrap().count() > 0);
}

#[test]
fn mutated_upstream_artifact_blocks_every_dependent_command() {
    let config = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(&config, dir.path());
    let watched = ["ce_stats.json", "surrogates.jsonl", "rejection.json", "poe_stats.json", "reports.json"];
    let snapshot: Vec<Vec<u8>> = watched.iter().map(|f| std::fs::read(dir.path().join(f)).unwrap()).collect();

    let ck = dir.path().join("classifier.json");
    let mut bytes = std::fs::read(&ck).unwrap();
    bytes.push(b'\n');
    std::fs::write(&ck, bytes).unwrap();

    for args in [
        &["fit-gaussian"][..],
        &["construct-ood"],
        &["train-rejection"],
        &["score", "--rule", "msp", "--network", "ce"],
        &["score", "--rule", "maha"],
        &["evaluate"],
    ] {
        let o = poe(&config, dir.path(), args);
        assert_eq!(error_kind(&o), "checksum", "{args:?}");
    }
    for (f, before) in watched.iter().zip(&snapshot) {
        assert_eq!(&std::fs::read(dir.path().join(f)).unwrap(), before, "{f} was rewritten");
    }
}

#[test]
fn missing_upstream_stage_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let o = poe(&tiny_config(), dir.path(), &["train-classifier"]);
    assert_eq!(error_kind(&o), "missing_artifact");
    ok(&tiny_config(), dir.path(), &["prepare-data"]);
    let o = poe(&tiny_config(), dir.path(), &["construct-ood"]);
    assert_eq!(error_kind(&o), "missing_artifact");
}

#[test]
fn malformed_config_and_bad_flags_fail_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "seeds = \"zero\"\n").unwrap();
    let o = poe(&bad, dir.path(), &["prepare-data"]);
    assert_eq!(error_kind(&o), "config");

    let o = poe(&tiny_config(), dir.path(), &["score", "--rule", "bogus"]);
    assert_ne!(error_kind(&o), "usage");

    let o = poe(&tiny_config(), dir.path(), &["train-rejection", "--objective", "scl"]);
    assert_eq!(error_kind(&o), "usage");
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn seed_change_needs_a_fresh_output_directory() {
    let config = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    ok(&config, dir.path(), &["prepare-data", "--seed", "3"]);
    let o = poe(&config, dir.path(), &["train-classifier", "--seed", "4"]);
    assert_eq!(error_kind(&o), "config");
}
