use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use coview_cli::{RunManifest, EXIT_DATA, EXIT_USAGE};

fn coview(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_coview"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = coview(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Every file of `dir` except the manifest, plus the manifest with its
/// wall-clock field cleared.
fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        let name = p.file_name().unwrap().to_string_lossy().to_string();
        if name == coview_cli::MANIFEST_FILE {
            let mut m = RunManifest::read(dir).unwrap();
            m.wall_clock_seconds = 0.0;
            files.insert(name, serde_json::to_vec(&m).unwrap());
        } else {
            files.insert(name, std::fs::read(&p).unwrap());
        }
    }
    files
}

struct Run {
    _tmp: tempfile::TempDir,
    root: std::path::PathBuf,
}

impl Run {
    fn path(&self, rel: &str) -> String {
        self.root.join(rel).display().to_string()
    }
}

/// generate -> train -> evaluate -> calibrate -> report on a tiny set.
fn pipeline() -> Run {
    let tmp = tempfile::tempdir().unwrap();
    let run = Run {
        root: tmp.path().to_path_buf(),
        _tmp: tmp,
    };
    ok(&["generate", "--out", &run.path("gen"), "--seed", "3", "--scenarios", "40", "--history", "6", "--future", "8"]);
    ok(&[
        "train", "--data", &run.path("gen/scenarios.jsonl"), "--out", &run.path("train"), "--epochs", "2", "--batch",
        "8", "--d-model", "8", "--heads", "2", "--modes", "3", "--train-ratio", "0.4", "--val-ratio", "0.1",
    ]);
    let ck = run.path("train/checkpoint.json");
    let data = run.path("gen/scenarios.jsonl");
    ok(&["evaluate", "--data", &data, "--checkpoint", &ck, "--out", &run.path("eval")]);
    ok(&["calibrate", "--data", &data, "--checkpoint", &ck, "--out", &run.path("bands"), "--alpha", "0.2,0.1,0.05"]);
    ok(&["report", "--data", &data, "--checkpoint", &ck, "--bands", &run.path("bands"), "--out", &run.path("report")]);
    run
}

#[test]
fn full_pipeline_outputs() {
    let run = pipeline();
    for dir in ["gen", "train", "eval", "bands", "report"] {
        assert!(run.root.join(dir).join("manifest.json").exists(), "{dir}");
    }
    let bands = std::fs::read_dir(run.root.join("bands"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("band_"))
        .count();
    assert_eq!(bands, 18);

    let eval = std::fs::read_to_string(run.root.join("eval/evaluation.csv")).unwrap();
    assert_eq!(eval.lines().count(), 7, "{eval}");
    assert!(eval.contains(",ego,") && eval.contains(",fused,"));

    let uq = std::fs::read_to_string(run.root.join("report/uq_metrics.csv")).unwrap();
    assert_eq!(uq.lines().count(), 1 + 18 * 3);

    let plots: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.root.join("report/plots.json")).unwrap()).unwrap();
    assert_eq!(plots.as_array().unwrap().len(), 4);

    let metrics = std::fs::read_to_string(run.root.join("train/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
}

#[test]
fn commands_are_deterministic() {
    let run = pipeline();
    let before: Vec<_> = ["gen", "train", "eval", "bands", "report"]
        .iter()
        .map(|d| snapshot(&run.root.join(d)))
        .collect();
    let data = run.path("gen/scenarios.jsonl");
    let ck = run.path("train/checkpoint.json");
    ok(&["generate", "--out", &run.path("gen"), "--seed", "3", "--scenarios", "40", "--history", "6", "--future", "8"]);
    ok(&[
        "train", "--data", &data, "--out", &run.path("train"), "--epochs", "2", "--batch", "8", "--d-model", "8",
        "--heads", "2", "--modes", "3", "--train-ratio", "0.4", "--val-ratio", "0.1",
    ]);
    ok(&["evaluate", "--data", &data, "--checkpoint", &ck, "--out", &run.path("eval")]);
    ok(&["calibrate", "--data", &data, "--checkpoint", &ck, "--out", &run.path("bands"), "--alpha", "0.2,0.1,0.05"]);
    ok(&["report", "--data", &data, "--checkpoint", &ck, "--bands", &run.path("bands"), "--out", &run.path("report")]);
    for (dir, old) in ["gen", "train", "eval", "bands", "report"].iter().zip(before) {
        assert_eq!(snapshot(&run.root.join(dir)), old, "{dir} changed on rerun");
    }
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(coview(&["train"]).status.code(), Some(EXIT_USAGE));
    assert_eq!(coview(&["frobnicate"]).status.code(), Some(EXIT_USAGE));
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().display().to_string();
    assert_eq!(
        coview(&["generate", "--out", &out, "--occlusion-rate", "1.5"]).status.code(),
        Some(EXIT_USAGE)
    );
    assert_eq!(coview(&["--help"]).status.code(), Some(0));
}

#[test]
fn data_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |rel: &str| tmp.path().join(rel).display().to_string();
    let out = coview(&["train", "--data", &p("missing.jsonl"), "--out", &p("t")]);
    assert_eq!(out.status.code(), Some(EXIT_DATA));

    std::fs::write(tmp.path().join("bad.jsonl"), "{not json}\n").unwrap();
    let out = coview(&["train", "--data", &p("bad.jsonl"), "--out", &p("t")]);
    assert_eq!(out.status.code(), Some(EXIT_DATA));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
}

#[test]
fn horizon_mismatch_between_data_and_checkpoint() {
    let run = pipeline();
    ok(&["generate", "--out", &run.path("other"), "--scenarios", "5", "--history", "7", "--future", "8"]);
    let out = coview(&[
        "evaluate",
        "--data",
        &run.path("other/scenarios.jsonl"),
        "--checkpoint",
        &run.path("train/checkpoint.json"),
        "--out",
        &run.path("e2"),
    ]);
    assert_eq!(out.status.code(), Some(EXIT_DATA));
    assert!(String::from_utf8_lossy(&out.stderr).contains("T_h=7"));
}
