//! Black-box tests of the CLI contract: subcommands, flags, artifact
//! layout, and exit codes (0 success, 1 run/validation failure, 2
//! usage or config error).

use assert_cmd::Command;
use predicates::prelude::*;
use std::path::Path;

fn write_small_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("small.toml");
    std::fs::write(
        &path,
        r#"
[run]
duration_s = 20.0
seed = 1

[scenario]
target_radius_m = 400.0

[scenario.grid]
road_length_m = 2800.0
n_vehicles = 12

[protocol]
kind = "hybrid-vehcloud"
"#,
    )
    .unwrap();
    path
}

fn vehcloud() -> Command {
    Command::cargo_bin("vehcloud").unwrap()
}

#[test]
fn run_prints_summary_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_small_config(tmp.path());
    vehcloud()
        .args(["run", "--config"])
        .arg(&cfg)
        .assert()
        .success()
        .stdout(predicate::str::contains("protocol=hybrid-vehcloud"))
        .stdout(predicate::str::contains("n_vehicles=12"))
        .stdout(predicate::str::contains("delivery_probability="))
        .stdout(predicate::str::contains("collision_ratio="));
}

#[test]
fn seed_and_set_overrides_apply() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_small_config(tmp.path());
    vehcloud()
        .args(["run", "--config"])
        .arg(&cfg)
        .args(["--seed", "9", "--set", "scenario.grid.n_vehicles=15"])
        .assert()
        .success()
        .stdout(predicate::str::contains("n_vehicles=15 seed=9"));
}

#[test]
fn missing_config_is_a_usage_error() {
    vehcloud()
        .args(["run", "--config", "/nonexistent/nope.toml"])
        .assert()
        .code(2);
}

#[test]
fn unknown_set_key_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_small_config(tmp.path());
    vehcloud()
        .args(["run", "--config"])
        .arg(&cfg)
        .args(["--set", "protocol.no_such_knob=1"])
        .assert()
        .code(2);
}

#[test]
fn trace_without_out_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_small_config(tmp.path());
    vehcloud()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--trace")
        .assert()
        .code(2)
        .stderr(predicate::str::contains("--out"));
}

#[test]
fn run_out_writes_artifacts_and_validate_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_small_config(tmp.path());
    let out = tmp.path().join("run1");
    vehcloud()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .args(["--trace", "--debug-events"])
        .assert()
        .success();
    for f in ["config.toml", "summary.csv", "records.csv", "events.log", "trace.csv"] {
        assert!(out.join(f).exists(), "missing artifact {f}");
    }
    let trace = std::fs::read_to_string(out.join("trace.csv")).unwrap();
    assert!(trace.starts_with("time_s,vehicle_id,x_m,y_m,speed_mps\n"));
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.starts_with("# config_hash="));

    vehcloud()
        .arg("validate")
        .arg(&out)
        .assert()
        .success()
        .stdout(predicate::str::contains("validate: pass"));

    // Tampering with a metric CSV must be caught (exit 1).
    let tampered = summary.replace("hybrid-vehcloud", "hybrid-vehcIoud");
    std::fs::write(out.join("summary.csv"), tampered).unwrap();
    vehcloud()
        .arg("validate")
        .arg(&out)
        .assert()
        .code(1)
        .stderr(predicate::str::contains("validate: FAIL"));
}

#[test]
fn validate_requires_event_log() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_small_config(tmp.path());
    let out = tmp.path().join("run-no-events");
    vehcloud()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .assert()
        .success();
    vehcloud()
        .arg("validate")
        .arg(&out)
        .assert()
        .code(2)
        .stderr(predicate::str::contains("events.log"));
}

#[test]
fn sweep_writes_figure_csvs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_small_config(tmp.path());
    let out = tmp.path().join("sweep");
    vehcloud()
        .args(["sweep", "--config"])
        .arg(&cfg)
        .args([
            "--protocols",
            "hybrid-vehcloud,cmds-like",
            "--counts",
            "12",
            "--seeds",
            "0-1",
            "--jobs",
            "1",
        ])
        .arg("--out")
        .arg(&out)
        .assert()
        .success()
        .stdout(predicate::str::contains("4 runs ok"));
    for f in [
        "runs.csv",
        "figure3_delay.csv",
        "figure4_delivery.csv",
        "figure5_collision.csv",
        "figure6_throughput.csv",
    ] {
        assert!(out.join(f).exists(), "missing sweep artifact {f}");
    }
    let fig = std::fs::read_to_string(out.join("figure4_delivery.csv")).unwrap();
    assert!(fig.contains("hybrid-vehcloud_mean"));
    assert!(fig.contains("# seeds=0,1"));
}

#[test]
fn sweep_rejects_unknown_protocol() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_small_config(tmp.path());
    vehcloud()
        .args(["sweep", "--config"])
        .arg(&cfg)
        .args(["--protocols", "flooding", "--counts", "12", "--seeds", "0"])
        .arg("--out")
        .arg(tmp.path().join("x"))
        .assert()
        .code(2);
}

#[test]
fn gen_scenario_writes_trace_and_obstacles() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_small_config(tmp.path());
    let out = tmp.path().join("scenario");
    vehcloud()
        .args(["gen-scenario", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .assert()
        .success();
    let trace = std::fs::read_to_string(out.join("trace.csv")).unwrap();
    assert!(trace.starts_with("time_s,vehicle_id,x_m,y_m,speed_mps\n"));
    let obstacles = std::fs::read_to_string(out.join("obstacles.csv")).unwrap();
    assert!(obstacles.starts_with("xmin_m,ymin_m,xmax_m,ymax_m\n"));
    assert!(obstacles.lines().count() > 1, "grid scenario has buildings");
}
