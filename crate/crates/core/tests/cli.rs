use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use hjsafe::sim::{AxisSpec, Scenario};
use serde_json::{json, Value};

fn small_scenario() -> Scenario {
    let mut s = Scenario::quad2d_demo();
    s.subsystems[0].grid = vec![AxisSpec::new(0.0, 3.2, 41), AxisSpec::new(-6.0, 6.0, 41)];
    s.subsystems[0].coarse = Some(vec![21, 21]);
    s.timing.duration = 3.0;
    s
}

fn write_config(dir: &Path, extra: Value) -> std::path::PathBuf {
    let mut cfg = json!({ "scenario": serde_json::to_value(small_scenario()).unwrap() });
    if let (Value::Object(a), Value::Object(b)) = (&mut cfg, extra) {
        a.extend(b);
    }
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn hjsafe(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hjsafe"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn report(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stderr)))
}

#[test]
fn solve_is_byte_reproducible_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), json!({}));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let ra = hjsafe(&["solve", "--threads", "1"], &cfg, &a);
    let rb = hjsafe(&["solve", "--threads", "3"], &cfg, &b);
    assert_eq!(ra.status.code(), Some(0));
    assert_eq!(rb.status.code(), Some(0));
    let (ja, jb) = (report(&ra), report(&rb));
    assert_eq!(ja["config_hash"], jb["config_hash"]);
    assert_eq!(ja["config_hash"].as_str().unwrap().len(), 64);
    let sub = &ja["subsystems"][0];
    assert_eq!(sub["grid"], json!([41, 41]));
    assert_eq!(sub["coarse_grid"], json!([21, 21]));
    assert!(sub["iterations"].as_u64().unwrap() > 0);
    assert!(sub["converged"].as_bool().unwrap());
    assert_eq!(fs::read(a.join("quad2d.hjvf")).unwrap(), fs::read(b.join("quad2d.hjvf")).unwrap());
    assert!(a.join("quad2d_residuals.csv").exists());
    assert!(a.join("solve_report.json").exists());
}

#[test]
fn update_with_unchanged_bounds_is_immediate() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let cfg = write_config(dir.path(), json!({ "update": { "previous": first } }));
    assert_eq!(hjsafe(&["solve"], &cfg, &first).status.code(), Some(0));
    let out = hjsafe(&["update"], &cfg, &dir.path().join("second"));
    assert_eq!(out.status.code(), Some(0));
    let iterations = report(&out)["subsystems"][0]["iterations"].as_u64().unwrap();
    assert!(iterations <= 5, "{iterations} iterations");
}

#[test]
fn gpfit_bounds_feed_an_update() {
    let dir = tempfile::tempdir().unwrap();
    let (sim, fit, first) = (dir.path().join("sim"), dir.path().join("fit"), dir.path().join("first"));
    let cfg = write_config(
        dir.path(),
        json!({
            "gpfit": { "measurements": sim.join("measurements.csv") },
            "update": { "previous": first, "bounds": fit },
        }),
    );
    let s = hjsafe(&["simulate"], &cfg, &sim);
    let sj = report(&s);
    assert_eq!(sj["episode"]["ticks"], 300);
    for f in ["episode.csv", "events.jsonl", "measurements.csv", "simulate_report.json"] {
        assert!(sim.join(f).exists(), "{f}");
    }
    let violations = sj["episode"]["constraint_violations"].as_u64().unwrap();
    assert_eq!(s.status.code(), Some(if violations == 0 { 0 } else { 1 }));

    let g = hjsafe(&["gpfit"], &cfg, &fit);
    assert_eq!(g.status.code(), Some(0));
    assert_eq!(report(&g)["gp"][0]["training_points"].as_u64().unwrap() > 0, true);
    assert!(fit.join("quad2d_lo0.hjvf").exists() && fit.join("quad2d_hi0.hjvf").exists());

    assert_eq!(hjsafe(&["solve"], &cfg, &first).status.code(), Some(0));
    let u = hjsafe(&["update"], &cfg, &dir.path().join("upd"));
    assert_eq!(u.status.code(), Some(0), "{}", String::from_utf8_lossy(&u.stderr));
}

#[test]
fn bench_reports_three_methods() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), json!({ "bench": { "update_scale": 1.5 } }));
    let out = hjsafe(&["bench"], &cfg, dir.path());
    assert_eq!(out.status.code(), Some(0));
    let rows = report(&out)["bench"].as_array().unwrap().clone();
    let methods: Vec<&str> = rows.iter().map(|r| r["method"].as_str().unwrap()).collect();
    assert_eq!(methods, ["cold", "warm", "coarse+warm"]);
    // cold and warm share the initial solve
    assert_eq!(rows[0]["initial_iterations"], rows[1]["initial_iterations"]);
    let table = String::from_utf8(out.stderr).unwrap();
    assert!(table.contains("coarse+warm") && table.contains("update_it"));
}

#[test]
fn invalid_configs_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), json!({ "unexpected": true }));
    let out = hjsafe(&["solve"], &cfg, dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unexpected"));

    let cfg = write_config(dir.path(), json!({}));
    let out = hjsafe(&["update"], &cfg, dir.path());
    assert_eq!(out.status.code(), Some(2));

    let missing = dir.path().join("missing.json");
    assert_eq!(hjsafe(&["solve"], &missing, dir.path()).status.code(), Some(2));
}

#[test]
fn preset_prints_a_loadable_scenario() {
    let out = Command::new(env!("CARGO_BIN_EXE_hjsafe")).args(["preset", "near_hover_demo"]).output().unwrap();
    assert!(out.status.success());
    let s: Scenario = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(s, Scenario::near_hover_demo());
}
