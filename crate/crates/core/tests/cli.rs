use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_symteam"))
}

fn spec(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("specs").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn run_out(args: &[&str], out: &Path) -> Output {
    bin().args(args).arg("--out").arg(out).output().expect("binary runs")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn golden() -> String {
    spec("golden_ratio.json").to_string_lossy().into_owned()
}

#[test]
fn check_accepts_sample_specs() {
    for name in ["golden_ratio.json", "delayed_pair.json", "meanfield.json"] {
        let out = run(&["check", spec(name).to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "{name}: {}", stderr(&out));
    }
}

#[test]
fn check_rejects_indefinite_control_weight() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    let text = std::fs::read_to_string(spec("golden_ratio.json"))
        .unwrap()
        .replace("\"R\": [[1.0]]", "\"R\": [[0.0]]");
    std::fs::write(&path, text).unwrap();
    let out = run(&["check", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let text = format!("{}{}", stderr(&out), String::from_utf8_lossy(&out.stdout));
    assert!(text.contains("R"), "{text}");
}

#[test]
fn dare_reports_golden_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dare.json");
    let out = run_out(&["dare", &golden()], &path);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let p = read_json(&path)["P"][0][0].as_f64().unwrap();
    assert!((p - 1.6180339887).abs() < 1e-9, "P = {p}");
}

#[test]
fn dare_iteration_cap_is_non_convergence() {
    let out = run(&["dare", &golden(), "--max-iter", "2"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn usage_errors_exit_three() {
    assert_eq!(run(&["simulate", &golden(), "--rollouts", "10"]).status.code(), Some(3));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(3));
    assert_eq!(run(&["check", "/nonexistent/spec.json"]).status.code(), Some(3));
    let short = run(&["sweep-mft", spec("meanfield.json").to_str().unwrap(), "--schedule", "2,4", "--seed", "1"]);
    assert_eq!(short.status.code(), Some(3), "{}", stderr(&short));
}

#[test]
fn tree_solver_rejects_delayed_spec() {
    let out = run(&["solve-tree", spec("delayed_pair.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
}

#[test]
fn verify_passes_optimal_policy() {
    let out = run(&["verify", &golden(), "--rollouts", "2000", "--seed", "4"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
}

#[test]
fn verify_flags_corrupted_gain() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("tree.json");
    let out = run_out(&["solve-tree", &golden()], &report);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let mut value = read_json(&report);
    let k0 = value["policy"]["K"][0][0][0].as_f64().unwrap();
    value["policy"]["K"][0][0][0] = Value::from(k0 + 0.3);
    let corrupted = dir.path().join("corrupted.json");
    std::fs::write(&corrupted, serde_json::to_string(&value).unwrap()).unwrap();
    let out = run(&[
        "verify",
        &golden(),
        "--policy",
        corrupted.to_str().unwrap(),
        "--rollouts",
        "2000",
        "--seed",
        "4",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("pbp_check"), "{}", stderr(&out));
}

#[test]
fn solved_policy_round_trips_through_simulate() {
    let dir = tempfile::tempdir().unwrap();
    for (name, solver) in [("golden_ratio.json", "solve-tree"), ("delayed_pair.json", "solve-delayed")] {
        let spec = spec(name);
        let spec = spec.to_str().unwrap();
        let report = dir.path().join(format!("{solver}.json"));
        assert!(run_out(&[solver, spec], &report).status.success());
        let from_file = dir.path().join("from_file.json");
        let fresh = dir.path().join("fresh.json");
        let sim = ["simulate", spec, "--rollouts", "3000", "--seed", "8"];
        let out = bin()
            .args(sim)
            .arg("--policy")
            .arg(&report)
            .arg("--out")
            .arg(&from_file)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", stderr(&out));
        assert!(run_out(&sim, &fresh).status.success());
        let (a, b) = (read_json(&from_file), read_json(&fresh));
        assert_eq!(a["simulation"], b["simulation"], "{name}");
        assert_eq!(a["policy"], b["policy"], "{name}");
        assert_eq!(a["policy"], read_json(&report)["policy"], "{name}");
    }
}

#[test]
fn simulate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["simulate", &golden(), "--rollouts", "2000", "--seed", "21"];
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    assert!(run_out(&args, &a).status.success());
    assert!(run_out(&args, &b).status.success());
    let other = ["simulate", &golden(), "--rollouts", "2000", "--seed", "22"];
    assert!(run_out(&other, &c).status.success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn sweep_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("sweep.csv");
    let out = bin()
        .args(["sweep-mft", spec("meanfield.json").to_str().unwrap()])
        .args(["--schedule", "2,4,8", "--rollouts", "500", "--seed", "3", "--table"])
        .arg(&table)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(&table).unwrap();
    assert_eq!(text.lines().count(), 4, "{text}");
}

#[test]
fn infinite_horizon_commands_succeed() {
    for args in [
        vec!["solve-tree-inf".to_string(), golden()],
        vec!["solve-delayed-inf".to_string(), spec("delayed_pair.json").to_string_lossy().into_owned()],
        vec!["solve-ndm".to_string(), golden(), "--n".into(), "4".into()],
        vec!["solve-mf".to_string(), spec("meanfield.json").to_string_lossy().into_owned()],
    ] {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let out = run(&args);
        assert_eq!(out.status.code(), Some(0), "{args:?}: {}", stderr(&out));
    }
}
