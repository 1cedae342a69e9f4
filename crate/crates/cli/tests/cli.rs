use std::path::Path;
use std::process::{Command, Output};

use atdm_core::ctm::load_stretch;

fn atdm(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atdm"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn manifest_outputs(dir: &Path) -> Vec<String> {
    let text = std::fs::read_to_string(dir.join("manifest.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s.as_str().unwrap().to_string())
        .collect()
}

#[test]
fn missing_sensor_column_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("bad.csv"),
        "timestamp_utc,sensor_id,vehicle_count,period_s\n2024-01-01T07:00:00Z,s0,10,60\n",
    )
    .unwrap();
    let out = atdm(&["identify", "--data", "bad.csv", "--out", "fit"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("avg_speed_kmh"), "{}", stderr(&out));
}

#[test]
fn quantile_outside_unit_interval_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = atdm(
        &["identify", "--data", "x.csv", "--out", "fit", "--quantile", "1.5"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn empty_axis_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("s.toml"), "seed = 1\n").unwrap();
    let out = atdm(
        &["sweep", "--config", "s.toml", "--axis", "spots=", "--out", "sw"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("sw").exists());
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("s.toml"), "[parameters]\nspeed_limit = 80\n").unwrap();
    let out = atdm(&["simulate", "--config", "s.toml", "--out", "run"], dir.path());
    assert_ne!(out.status.code(), Some(0));
    assert!(stderr(&out).contains("speed_limit"), "{}", stderr(&out));
}

#[test]
fn baseline_only_writes_delta() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("s.toml"), "seed = 3\n").unwrap();
    let out = atdm(
        &["simulate", "--config", "s.toml", "--out", "run", "--baseline-only"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let mut files: Vec<String> = std::fs::read_dir(dir.path().join("run"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    files.sort();
    assert_eq!(files, ["delta.csv", "manifest.json"]);
    assert_eq!(manifest_outputs(&dir.path().join("run")), ["delta.csv"]);
    let rows = std::fs::read_to_string(dir.path().join("run/delta.csv")).unwrap().lines().count();
    assert_eq!(rows, 469);
}

#[test]
fn sweep_grid_is_cartesian() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("s.toml"), "seed = 2\n").unwrap();
    let out = atdm(
        &[
            "sweep", "--config", "s.toml", "--axis", "spots=50:100:50", "--axis", "pev_share=0.05,0.1", "--out", "sw",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(dir.path().join("sw/sweep.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "spots,pev_share,seed,pi,error");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.ends_with(',')), "{rows:?}");
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("sw/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "sweep");
    assert_eq!(manifest["seed"], 2);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn non_convergence_writes_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("s.toml"), "seed = 1\n[parameters]\nmax_sweeps = 1\n").unwrap();
    let out = atdm(&["simulate", "--config", "s.toml", "--out", "run"], dir.path());
    assert_eq!(out.status.code(), Some(5), "{}", stderr(&out));
    let text = std::fs::read_to_string(dir.path().join("run/diagnostics.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["sweeps"], 1);
    assert!(v["interval"].is_u64());
}

#[test]
fn synth_then_identify_recovers_truth() {
    let dir = tempfile::tempdir().unwrap();
    let out = atdm(&["synth", "--out", "day", "--noise", "0"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let mut listed = manifest_outputs(&dir.path().join("day"));
    listed.sort();
    assert_eq!(
        listed,
        ["boundary.csv", "demand.csv", "scenario.toml", "sensors.csv", "truth_params.csv"]
    );
    let out = atdm(&["identify", "--data", "day/sensors.csv", "--out", "fit"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let truth = load_stretch(&dir.path().join("day/truth_params.csv")).unwrap();
    let fit = load_stretch(&dir.path().join("fit/params.csv")).unwrap();
    for (a, b) in fit.cells().iter().zip(truth.cells()) {
        for (x, y) in [
            (a.free_flow_speed_kmh, b.free_flow_speed_kmh),
            (a.wave_speed_kmh, b.wave_speed_kmh),
            (a.max_capacity_vehh, b.max_capacity_vehh),
            (a.max_density_vehkm, b.max_density_vehkm),
        ] {
            assert!((x - y).abs() / y < 1e-3, "{x} vs {y}");
        }
    }
    assert!(dir.path().join("fit/fit_report.json").exists());
    assert!(dir.path().join("fit/boundary.csv").exists());
}

#[test]
fn synthetic_scenario_file_runs() {
    let dir = tempfile::tempdir().unwrap();
    assert!(atdm(&["synth", "--out", "day", "--seed", "4"], dir.path()).status.success());
    let out = atdm(
        &["simulate", "--config", "day/scenario.toml", "--out", "run", "--baseline-only"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(dir.path().join("run/delta.csv").exists());
}
