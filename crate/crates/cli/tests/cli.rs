use serde_json::Value;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ifm-lab")).current_dir(dir).env_remove("IFM_LAB_SEED").args(args).output().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const SMALL_SWEEP: &str = r#"{"d_s": 6, "e_values": [3, 4], "trials": 2, "algorithms": ["ifm", "erm", "oracle"], "mode": "sampled:200", "baseline_samples": 200}"#;

#[test]
fn gen_then_run_from_the_written_spec() {
    let dir = tempfile::tempdir().unwrap();
    let out = lab(dir.path(), &["gen", "--seed", "3", "--random-mixing", "--out", "inst"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let spec = json(&dir.path().join("inst/spec.json"));
    assert_eq!(spec["seed"], 3);
    let out = lab(dir.path(), &["run", "--spec", "inst/spec.json", "--algorithm", "ifm", "--out", "r"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = json(&dir.path().join("r/run.json"));
    assert_eq!(run["algorithm"], "ifm");
    let oracle = run["oracle_accuracy"].as_f64().unwrap();
    for a in run["test_accuracy"].as_array().unwrap() {
        assert!((a.as_f64().unwrap() - oracle).abs() < 1e-6);
    }
    assert!(run["spurious_leak"].as_f64().unwrap() < 1e-6);
}

#[test]
fn run_prints_to_stdout_without_out() {
    let dir = tempfile::tempdir().unwrap();
    let out = lab(dir.path(), &["run", "--algorithm", "oracle", "--seed", "1"]);
    assert!(out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["algorithm"], "oracle");
}

#[test]
fn sweep_writes_artifacts_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.json"), SMALL_SWEEP).unwrap();
    for (out, jobs) in [("a", "1"), ("b", "2")] {
        let o = lab(dir.path(), &["sweep", "--config", "cfg.json", "--out", out, "--jobs", jobs]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = fs::read_to_string(dir.path().join("a/results.csv")).unwrap();
    assert_eq!(a, fs::read_to_string(dir.path().join("b/results.csv")).unwrap());
    assert_eq!(a.lines().count(), 1 + 3 * 2 * 2);
    for f in ["plot.svg", "plot.csv", "summary.json"] {
        assert!(dir.path().join("a").join(f).exists(), "{f}");
    }
    assert_eq!(json(&dir.path().join("a/summary.json"))["rows"], 12);
}

#[test]
fn seed_comes_from_the_environment_and_the_flag_wins() {
    let dir = tempfile::tempdir().unwrap();
    let gen = |env: Option<&str>, args: &[&str]| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_ifm-lab"));
        c.current_dir(dir.path()).env_remove("IFM_LAB_SEED").arg("gen").args(args);
        if let Some(s) = env {
            c.env("IFM_LAB_SEED", s);
        }
        let v: Value = serde_json::from_slice(&c.output().unwrap().stdout).unwrap();
        v["seed"].as_u64().unwrap()
    };
    assert_eq!(gen(None, &[]), 0);
    assert_eq!(gen(Some("42"), &[]), 42);
    assert_eq!(gen(Some("42"), &["--seed", "7"]), 7);
}

#[test]
fn plot_rerenders_a_results_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.json"), SMALL_SWEEP).unwrap();
    assert!(lab(dir.path(), &["sweep", "--config", "cfg.json", "--out", "s", "--jobs", "1"]).status.success());
    let o = lab(dir.path(), &["plot", "s/results.csv", "--title", "small run", "--out", "p"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let svg = fs::read_to_string(dir.path().join("p/plot.svg")).unwrap();
    assert!(svg.contains("small run"));
    assert_eq!(svg.matches("class=\"legend-entry\"").count(), 3);
}

#[test]
fn check_passes_and_injected_fault_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("chk.json"), r#"{"shrink": {"seeds": 3}, "irm": {"dims": [2], "instances": 20}}"#).unwrap();
    let ok = lab(dir.path(), &["check", "--config", "chk.json", "--out", "c"]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    assert_eq!(json(&dir.path().join("c/report.json"))["passed"], true);
    let bad = lab(dir.path(), &["check", "--config", "chk.json", "--fault", "non_shrinking_stack"]);
    assert_eq!(bad.status.code(), Some(1));
    let v: Value = serde_json::from_slice(&bad.stdout).unwrap();
    assert_eq!(v["passed"], false);
}

#[test]
fn bad_input_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let mode = lab(dir.path(), &["gen", "--mode", "sampled:1"]);
    assert_eq!(mode.status.code(), Some(2));
    let fault = lab(dir.path(), &["check", "--shrink", "--fault", "nonsense"]);
    assert_eq!(fault.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&fault.stderr).contains("nonsense"));
    let missing = lab(dir.path(), &["plot", "nowhere.csv"]);
    assert_eq!(missing.status.code(), Some(2));
}
