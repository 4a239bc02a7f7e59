use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_nm-supernet"));
    c.env("RUST_LOG", "warn");
    c
}

fn tiny_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.json")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("error line");
    serde_json::from_str(line).expect("stderr ends with error JSON")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn run_twice_gives_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    }
    for f in ["pareto.json", "generations.csv", "training_log.csv", "layer_configs.csv"] {
        let same = std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap();
        assert!(same, "{f} differs between runs");
    }
    let pareto = read_json(&a.join("pareto.json"));
    let manifest = read_json(&a.join("manifest.json"));
    assert_eq!(pareto["config_hash"], manifest["config_hash"]);
    assert_eq!(manifest["artifacts"], read_json(&b.join("manifest.json"))["artifacts"]);
    assert!(!pareto["pareto"].as_array().unwrap().is_empty());
    assert!(!a.join("FAILED.json").exists());
}

#[test]
fn seed_flag_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["pretrain", "--config", cfg.to_str().unwrap(), "--out", a.to_str().unwrap()]);
    ok(&["pretrain", "--config", cfg.to_str().unwrap(), "--out", b.to_str().unwrap(), "--seed", "9"]);
    let ma = read_json(&a.join("manifest.json"));
    let mb = read_json(&b.join("manifest.json"));
    assert_ne!(ma["config_hash"], mb["config_hash"]);
    assert_eq!(mb["seeds"]["master"], 9);
    let same = std::fs::read(a.join("teacher.ckpt")).unwrap() == std::fs::read(b.join("teacher.ckpt")).unwrap();
    assert!(!same);
}

#[test]
fn search_reuses_a_trained_supernet() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let out = dir.path().join("s");
    let out = out.to_str().unwrap();
    let missing = run(&["search", "--config", cfg.to_str().unwrap(), "--out", out]);
    assert!(!missing.status.success());
    assert_eq!(stderr_json(&missing)["stage"], "search");
    assert!(Path::new(out).join("FAILED.json").exists());

    ok(&["train-supernet", "--config", cfg.to_str().unwrap(), "--out", out]);
    assert!(Path::new(out).join("supernet.ckpt").exists());
    assert!(!Path::new(out).join("FAILED.json").exists());
    ok(&["search", "--config", cfg.to_str().unwrap(), "--out", out]);
    let pareto = read_json(&Path::new(out).join("pareto.json"));
    assert!(!pareto["pareto"].as_array().unwrap().is_empty());
}

#[test]
fn ablations_and_comparisons_emit_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let cases = [
        ("ablation-sampling", "ablation_sampling.json"),
        ("ablation-filter", "ablation_filter.json"),
        ("compare-er", "compare_er.json"),
        ("compare-estimator", "compare_estimator.json"),
    ];
    for (verb, file) in cases {
        let out = dir.path().join(verb);
        ok(&[verb, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        let report = read_json(&out.join(file));
        assert!(report["config_hash"].is_string(), "{verb}");
    }
    let abl = read_json(&dir.path().join("ablation-sampling/ablation_sampling.json"));
    let names: Vec<&str> = abl["variants"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v["name"].as_str().unwrap())
        .collect();
    assert_eq!(names, ["vanilla", "two-step"]);
    let er = read_json(&dir.path().join("compare-er/compare_er.json"));
    assert_eq!(er["rows"].as_array().unwrap().len(), 2);
}

#[test]
fn encode_decode_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("w.csv");
    let blob = dir.path().join("w.bin");
    let back = dir.path().join("back.csv");
    std::fs::write(&input, "1,-2,3,0.5,9,8,-7,6\n0.1,0.2,0.3,0.4,4,3,2,1\n").unwrap();
    let out = ok(&[
        "encode",
        "--input",
        input.to_str().unwrap(),
        "--level",
        "2:4",
        "--output",
        blob.to_str().unwrap(),
    ]);
    let info: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(info["retained"], 8);
    assert_eq!(info["index_bits"], 2);
    // 16-byte header, 8 f32 values, 8 two-bit indices
    assert_eq!(std::fs::metadata(&blob).unwrap().len(), 16 + 32 + 2);
    ok(&["decode", "--input", blob.to_str().unwrap(), "--output", back.to_str().unwrap()]);
    assert_eq!(
        std::fs::read_to_string(&back).unwrap(),
        "0,-2,3,0,9,8,0,0\n0,0,0.3,0.4,4,3,0,0\n"
    );
}

#[test]
fn failures_report_json_and_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"version": 1, "seed": 0, "output_dir": "x", "mystery": 1}"#).unwrap();
    let out = run(&["run", "--config", bad.to_str().unwrap()]);
    assert!(!out.status.success());
    let err = stderr_json(&out);
    assert!(err["error"].as_str().unwrap().contains("mystery"), "{err}");

    let out = run(&["run", "--config", dir.path().join("absent.json").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(stderr_json(&out)["error"].is_string());

    let junk = dir.path().join("junk.bin");
    std::fs::write(&junk, b"not a sparse blob").unwrap();
    let out = run(&["decode", "--input", junk.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(stderr_json(&out)["error"].is_string());

    let out = run(&["encode", "--input", "x", "--level", "3:4", "--output", "y"]);
    assert!(!out.status.success());
}
