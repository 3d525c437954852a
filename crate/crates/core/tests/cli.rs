use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn phctl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phctl"))
        .args(args)
        .env("PHCTL_THREADS", "2")
        .output()
        .expect("phctl runs")
}

fn run(cmd: &str, scenario: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, scenario.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    phctl(&args)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Shipped scenario with `edit` applied, written into `dir`.
fn variant(dir: &Path, name: &str, edit: impl FnOnce(&mut Value)) -> PathBuf {
    let text = fs::read_to_string(scenarios().join(format!("{name}.json"))).unwrap();
    let mut v: Value = serde_json::from_str(&text).unwrap();
    edit(&mut v);
    let path = dir.join(format!("{name}_variant.json"));
    fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    path
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn malformed_json_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, "{ \"model\": ").unwrap();
    let o = run("simulate", &path, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn unknown_field_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let path = variant(dir.path(), "rigid_case2", |v| {
        v["simulation"]["step"] = 0.1.into();
    });
    let o = run("simulate", &path, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("step"), "{}", stderr(&o));
}

#[test]
fn missing_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("tune", &dir.path().join("absent.json"), dir.path(), &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn zero_excitation_exits_4_naming_coordinate() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("identify", &scenarios().join("zero_excitation.json"), dir.path(), &[]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("coordinate 1"), "{}", stderr(&o));
}

#[test]
fn modified_synthesis_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    let path = variant(dir.path(), "flexible_case5", |v| {
        v["tuning"] = serde_json::json!({ "mode": "synthesize" });
    });
    let o = run("tune", &path, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));
}

#[test]
fn divergence_exits_3() {
    // a damping pole near -1e5 is far outside RK4's region at dt = 1e-3
    let dir = tempfile::tempdir().unwrap();
    let path = variant(dir.path(), "rigid_case2", |v| {
        v["controller"]["KP"] = serde_json::json!([[1e4, 0.0], [0.0, 1e4]]);
        v["simulation"]["substeps"] = 1.into();
    });
    let o = run("simulate", &path, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn exact_accel_with_csv_inputs_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let sim_out = dir.path().join("sim");
    let o = run("simulate", &scenarios().join("rigid_case2.json"), &sim_out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = sim_out.join("trajectory.csv");
    let path = variant(dir.path(), "rigid_identify", |v| {
        v["experiments"] = Value::Array(vec![]);
        v["inputs"] = serde_json::json!([csv, csv]);
    });
    let o = run("identify", &path, &dir.path().join("id"), &["--exact-accel"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = run("identify", &path, &dir.path().join("id"), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("simulate", "rigid_case1", "metrics.json"),
        ("tune", "rigid_synthesize", "tuning.json"),
        ("analyze", "flexible_analyze", "analysis.json"),
        ("identify", "rigid_identify", "identification.json"),
    ];
    for (cmd, name, file) in cases {
        let scenario = scenarios().join(format!("{name}.json"));
        let a = dir.path().join(format!("{name}_a"));
        let b = dir.path().join(format!("{name}_b"));
        assert!(run(cmd, &scenario, &a, &[]).status.success());
        assert!(run(cmd, &scenario, &b, &[]).status.success());
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{name}");
    }
}

#[test]
fn simulate_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("simulate", &scenarios().join("rigid_case1.json"), dir.path(), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let traj = fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    assert!(traj.starts_with("t,q1,q2,qd1,qd2,u1,u2\n"));
    assert_eq!(traj.lines().count(), 10002);
    let plot = fs::read_to_string(dir.path().join("plot.csv")).unwrap();
    assert!(plot.starts_with("t,q1,q1_star,q2,q2_star\n"));
    let metrics = read_json(&dir.path().join("metrics.json"));
    let crossings = metrics["metrics"]["coordinates"][0]["zero_crossings"].as_u64().unwrap();
    assert!(crossings >= 3, "q1 crossings {crossings}");
}

#[test]
fn case2_check_passes_with_small_margin() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("tune", &scenarios().join("rigid_case2.json"), dir.path(), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = &read_json(&dir.path().join("tuning.json"))["report"];
    assert_eq!(report["verdict"], Value::Bool(true));
    let rel = report["margin"].as_f64().unwrap() / report["rhs"].as_f64().unwrap();
    assert!(rel.abs() < 1e-4, "relative margin {rel}");
}

#[test]
fn case5_check_reports_both_conditions() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("tune", &scenarios().join("flexible_case5.json"), dir.path(), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = &read_json(&dir.path().join("tuning.json"))["report"];
    assert_eq!(report["verdict"], Value::Bool(true));
    assert_eq!(report["exact_verdict"], Value::Bool(true));
}

#[test]
fn epsilon_zero_gives_zero_min_eigenvalue() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("analyze", &scenarios().join("flexible_analyze.json"), dir.path(), &["--epsilon", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = read_json(&dir.path().join("analysis.json"));
    assert_eq!(report["main"]["min_eigenvalue"].as_f64().unwrap().abs(), 0.0);
    assert!(report["main"]["convergence_rate"].is_null());
}

#[test]
fn case4_vs_case5_momentum_discs_grow() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("analyze", &scenarios().join("flexible_analyze.json"), dir.path(), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cmp = &read_json(&dir.path().join("analysis.json"))["comparison"];
    let changes = cmp["momentum_radius_change"].as_array().unwrap();
    assert!(changes.iter().any(|c| c.as_f64().unwrap() > 0.0));
}

#[test]
fn every_shipped_scenario_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut names: Vec<_> = fs::read_dir(scenarios())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    names.sort();
    for path in names {
        let v = read_json(&path);
        let stem = path.file_stem().unwrap().to_string_lossy().into_owned();
        let out = dir.path().join(&stem);
        let cmd = if v.get("analysis").is_some() {
            "analyze"
        } else if !v["experiments"].is_null() || !v["inputs"].is_null() {
            "identify"
        } else if v.get("tuning").is_some_and(|t| t["mode"] == "synthesize") {
            "tune"
        } else {
            "simulate"
        };
        let o = run(cmd, &path, &out, &[]);
        let expected = if stem == "zero_excitation" { 4 } else { 0 };
        assert_eq!(o.status.code(), Some(expected), "{stem}: {}", stderr(&o));
    }
}
