//! Exercises the compiled binary the way a user would: spec files in,
//! JSON out, exit codes as documented.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fogrune::function::{FogFunction, GroupBy, InputSelector};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fogrune"))
}

fn scenario_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)
}

fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not JSON ({e}): {}",
            String::from_utf8_lossy(&out.stdout)
        )
    })
}

#[test]
fn validate_accepts_the_shipped_scenarios() {
    for name in ["car_fleet_small.json", "car_fleet_large.json", "car_fleet_mobile.json"] {
        let out = bin().args(["validate"]).arg(scenario_path(name)).output().unwrap();
        assert!(out.status.success(), "{name}: {:?}", out);
        assert!(out.stdout.is_empty(), "{name} printed to stdout");
        assert!(out.stderr.is_empty(), "{name} printed diagnostics");
    }
}

#[test]
fn validate_flags_broken_specs() {
    let dir = tempfile::tempdir().unwrap();

    let garbled = dir.path().join("garbled.json");
    std::fs::write(&garbled, "{ not json").unwrap();
    let out = bin().args(["validate"]).arg(&garbled).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());

    let unknown_op = dir.path().join("fn.json");
    let f = FogFunction::new(
        "ghost",
        "no_such_operator",
        vec![InputSelector::new("Car", GroupBy::PerEntityId)],
    );
    std::fs::write(&unknown_op, serde_json::to_string_pretty(&f).unwrap()).unwrap();
    let out = bin().args(["validate"]).arg(&unknown_op).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("operator"), "unexpected diagnostics: {stderr}");

    let missing = dir.path().join("nope.json");
    let out = bin().args(["validate"]).arg(&missing).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn run_scenario_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut reports = Vec::new();
    for i in 0..2 {
        let out_path = dir.path().join(format!("report-{i}.json"));
        let out = bin()
            .args(["run-scenario"])
            .arg(scenario_path("car_fleet_small.json"))
            .args(["--seed", "3", "--duration", "10", "--out"])
            .arg(&out_path)
            .output()
            .unwrap();
        assert!(out.status.success(), "{:?}", out);
        let v = stdout_json(&out);
        assert!(v.get("traffic").is_some());
        assert!(v["tasks_launched"].as_u64().unwrap() > 0);
        reports.push(std::fs::read(&out_path).unwrap());
    }
    assert_eq!(reports[0], reports[1], "same seed produced different reports");
}

#[test]
fn run_scenario_writes_a_message_log() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("messages.ndjson");
    let out = bin()
        .args(["run-scenario"])
        .arg(scenario_path("car_fleet_small.json"))
        .args(["--duration", "5", "--log-messages"])
        .arg(&log)
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = std::fs::read_to_string(&log).unwrap();
    let first = text.lines().next().expect("log is empty");
    let v: serde_json::Value = serde_json::from_str(first).unwrap();
    assert!(v.get("msg").is_some());
}

#[test]
fn mode_override_switches_placement() {
    let out = bin()
        .args(["run-scenario"])
        .arg(scenario_path("car_fleet_small.json"))
        .args(["--mode", "cloud", "--duration", "10"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(stdout_json(&out)["mode"], "cloud");
}

#[test]
fn bench_throughput_reports_scaling_rows() {
    let out = bin()
        .args(["bench", "throughput", "--workers", "1,2,4,8", "--tasks", "16"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{:?}", out);
    let rows = stdout_json(&out);
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 4);
    let throughput: Vec<f64> = rows
        .iter()
        .map(|r| r["throughput_per_s"].as_f64().unwrap())
        .collect();
    for w in throughput.windows(2) {
        assert!(w[1] > w[0] * 1.2, "throughput rows not scaling: {throughput:?}");
    }
}

#[test]
fn register_func_normalizes_and_extends_scenarios() {
    let dir = tempfile::tempdir().unwrap();
    let f = {
        let mut input = InputSelector::new("Car", GroupBy::PerEntityId);
        input.attribute_set = vec!["speed_kmh".into()];
        let mut f = FogFunction::new("echo_watch", "echo", vec![input]);
        f.output_types = vec!["EchoedCar".into()];
        f
    };
    let fn_path = dir.path().join("echo_watch.json");
    std::fs::write(&fn_path, serde_json::to_string_pretty(&f).unwrap()).unwrap();

    // Without a target the command just validates and echoes the function.
    let out = bin().args(["register-func"]).arg(&fn_path).output().unwrap();
    assert!(out.status.success(), "{:?}", out);
    assert_eq!(stdout_json(&out)["name"], "echo_watch");

    // With a target it extends the scenario on disk.
    let extended = dir.path().join("extended.json");
    let out = bin()
        .args(["register-func"])
        .arg(&fn_path)
        .arg("--target")
        .arg(scenario_path("car_fleet_small.json"))
        .arg("--out")
        .arg(&extended)
        .output()
        .unwrap();
    assert!(out.status.success(), "{:?}", out);
    let v = stdout_json(&out);
    assert_eq!(v["registered"], "echo_watch");
    let check = bin().args(["validate"]).arg(&extended).output().unwrap();
    assert!(check.status.success());

    // A name collision must be rejected, leaving the target untouched.
    let dup = dir.path().join("dup.json");
    let mut clash = f.clone();
    clash.name = "speed_watch".into();
    std::fs::write(&dup, serde_json::to_string(&clash).unwrap()).unwrap();
    let out = bin()
        .args(["register-func"])
        .arg(&dup)
        .arg("--target")
        .arg(scenario_path("car_fleet_small.json"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn inspect_summarizes_a_run() {
    let out = bin()
        .args(["inspect", "tasks", "--scenario"])
        .arg(scenario_path("car_fleet_small.json"))
        .args(["--duration", "5"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{:?}", out);
    let v = stdout_json(&out);
    assert!(v.get("functions").is_some());

    let out = bin()
        .args(["inspect", "workers", "--scenario"])
        .arg(scenario_path("car_fleet_small.json"))
        .args(["--duration", "5"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(stdout_json(&out).get("workers").is_some());
}
