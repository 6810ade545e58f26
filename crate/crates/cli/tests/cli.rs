use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn sdeinv(args: &[&str], out_dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdeinv"))
        .args(args)
        .arg("--out-dir")
        .arg(out_dir)
        .env_remove("SDEINV_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn entry<'a>(report: &'a Value, id: &str) -> &'a Value {
    report["report"]["entries"].as_array().unwrap().iter().find(|e| e["check_id"] == id).unwrap_or_else(|| panic!("no entry {id}"))
}

#[test]
fn validate_passes_a_positive_scenario_and_writes_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = sdeinv(&["validate", "ou-gauss"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let run = dir.path().join("ou-gauss/validate");
    let report = json(&run.join("report.json"));
    assert_eq!(report["report"]["entries"].as_array().unwrap().len(), 9);
    let manifest = json(&run.join("manifest.json"));
    assert_eq!(manifest["passed"], true);
    assert_eq!(manifest["scenario"], "ou-gauss d=2");
    assert_eq!(manifest["rerun"][0], "validate");
}

#[test]
fn validate_fails_a_broken_drift_with_exit_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = sdeinv(&["validate", "--scenario", "broken-drift strength=0.5"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let report = json(&dir.path().join("broken-drift/validate/report.json"));
    assert_eq!(entry(&report, "divergence-free")["status"], "fail");
    assert_eq!(entry(&report, "ellipticity")["status"], "pass");
}

#[test]
fn configuration_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = sdeinv(&["validate", "no-such-scenario"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown scenario"));

    let out = sdeinv(&["validate", "singular-rotation", "alpha=2"], dir.path());
    assert_eq!(out.status.code(), Some(2));

    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[scenario]\nname = \"ou-gauss\"\n[params]\nd = 1.5\n").unwrap();
    let out = sdeinv(&["validate", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 4"));
}

#[test]
fn config_file_and_positional_forms_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("rot.toml");
    std::fs::write(&cfg, "[scenario]\nname = \"ou-rotation\"\n\n[params]\nomega = 2.5\n").unwrap();
    let a = sdeinv(&["validate", "--config", cfg.to_str().unwrap()], &dir.path().join("a"));
    let b = sdeinv(&["validate", "ou-rotation", "omega=2.5"], &dir.path().join("b"));
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(b.status.code(), Some(0));
    let ra = json(&dir.path().join("a/ou-rotation/validate/report.json"));
    let rb = json(&dir.path().join("b/ou-rotation/validate/report.json"));
    assert_eq!(ra["report"], rb["report"]);
}

#[test]
fn simulate_runs_the_requested_tests_and_dumps_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = sdeinv(
        &["simulate", "ou-gauss", "d=1", "--paths", "2000", "--dt", "0.01", "--horizon", "0.5", "--test", "invariance", "--test", "qv"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let run = dir.path().join("ou-gauss/simulate");
    let report = json(&run.join("report.json"));
    for id in ["explosions", "empirical-invariance", "quadratic-variation"] {
        assert_eq!(entry(&report, id)["status"], "pass", "{id}");
    }
    assert!(report["report"]["entries"].as_array().unwrap().iter().all(|e| e["check_id"] != "martingale"));
    let paths = std::fs::read_to_string(run.join("paths.csv")).unwrap();
    assert_eq!(paths.lines().next(), Some("path_id,t,x_1"));
    // 100 paths, 51 recorded times each
    assert_eq!(paths.lines().count(), 1 + 100 * 51);
    let marginals = std::fs::read_to_string(run.join("marginals.csv")).unwrap();
    assert_eq!(marginals.lines().count(), 1 + 40);
    assert!(run.join("plot.py").exists());
    assert!(!run.join("martingale.csv").exists());
}

#[test]
fn rerunning_a_manifest_reproduces_the_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let first =
        sdeinv(&["simulate", "ou-rotation", "omega=1", "--paths", "500", "--dt", "0.01", "--horizon", "0.3", "--seed", "7"], dir.path());
    assert_eq!(first.status.code(), Some(0));
    let run = dir.path().join("ou-rotation/simulate");
    let before = json(&run.join("report.json"));
    let manifest = json(&run.join("manifest.json"));
    assert_eq!(manifest["options"]["seed"], 7);
    let rerun: Vec<String> = manifest["rerun"].as_array().unwrap().iter().map(|v| v.as_str().unwrap().to_string()).collect();
    let args: Vec<&str> = rerun.iter().map(String::as_str).collect();
    let again = sdeinv(&args, &dir.path().join("again"));
    assert_eq!(again.status.code(), Some(0));
    let after = json(&dir.path().join("again/ou-rotation/simulate/report.json"));
    assert_eq!(before["report"], after["report"]);
    assert_eq!(before["extra"]["summary"], after["extra"]["summary"]);
}

#[test]
fn tolerance_scale_can_turn_a_pass_into_a_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = sdeinv(&["validate", "ou-gauss", "d=1", "--tolerance-scale", "1e-20"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let manifest = json(&dir.path().join("ou-gauss/validate/manifest.json"));
    assert!(manifest["failures"].as_array().unwrap().iter().any(|f| f == "normalization"));
}

#[test]
fn resolvent_on_a_one_dimensional_scenario_passes_and_dumps_the_operator() {
    let dir = tempfile::tempdir().unwrap();
    let out = sdeinv(&["resolvent", "ou-gauss", "d=1", "--boxes", "3"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let run = dir.path().join("ou-gauss/resolvent");
    let report = json(&run.join("report.json"));
    for id in ["submarkov", "l1-contraction", "resolvent-equation", "nested-monotone-1-2", "nested-monotone-2-3", "chi-decreasing"] {
        assert_eq!(entry(&report, id)["status"], "pass", "{id}");
    }
    assert_eq!(report["extra"]["chi_window_norms"].as_array().unwrap().len(), 3);
    let coo = std::fs::read_to_string(run.join("operator.coo")).unwrap();
    assert!(coo.lines().count() > 3);
    assert_eq!(std::fs::read_to_string(run.join("chi.csv")).unwrap().lines().count(), 4);
}

#[test]
fn report_consolidates_and_reflects_failures() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(sdeinv(&["validate", "ou-gauss", "d=1"], dir.path()).status.code(), Some(0));
    let good = dir.path().join("ou-gauss/validate/manifest.json");
    let out = sdeinv(&["report", good.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let all = json(&dir.path().join("consolidated.json"));
    assert_eq!(all["passed"], true);
    assert_eq!(all["runs"].as_array().unwrap().len(), 1);

    assert_eq!(sdeinv(&["validate", "broken-drift"], dir.path()).status.code(), Some(1));
    let bad = dir.path().join("broken-drift/validate/manifest.json");
    let out = sdeinv(&["report", good.to_str().unwrap(), bad.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(json(&dir.path().join("consolidated.json"))["runs"].as_array().unwrap().len(), 2);
}

#[test]
fn output_directory_comes_from_the_environment_when_not_given() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_sdeinv")).args(["validate", "drift-1d"]).env("SDEINV_OUT_DIR", dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(dir.path().join("drift-1d/validate/manifest.json").exists());
}
