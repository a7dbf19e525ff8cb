use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rpmeas"))
        .args(args)
        .arg("--out")
        .arg(dir.join("out"))
        .arg("--quiet")
        .output()
        .unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

const OU: &str = r#"{"type": "ou", "params": {"a": 1.0, "forcing_amp": 1.0, "tau": 6.283185307179586, "sigma": 1.0}}"#;

fn ou_respond(eps: f64) -> String {
    format!(
        r#"{{"model": {OU},
            "sim": {{"steps_per_period": 200, "seed": 3, "n_paths": 1000, "burn_in_periods": 2, "horizon": 10.0, "max_lag": 6.0}},
            "perturbation": {{"epsilon": {eps}, "direction": [1.0], "profile": {{"type": "ramped_step", "t0": 4.0, "delta_t": 2.0}}}}}}"#
    )
}

/// Rows of `response.csv` as `(delta_direct, delta_fdt_qg)` strings.
fn response_columns(dir: &Path) -> Vec<(String, String)> {
    let text = std::fs::read_to_string(dir.join("out/response.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "t,observable,delta_direct,stderr_direct,delta_fdt_qg");
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[2].to_string(), f[4].to_string())
        })
        .collect()
}

#[test]
fn missing_model_is_a_config_error() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "c.json", r#"{"sim": {"seed": 1}}"#);
    let out = run(&["check", "--config", &cfg], d.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model"));
}

#[test]
fn unknown_key_and_bad_step_are_config_errors() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "a.json", &format!(r#"{{"model": {OU}, "sim": {{"sede": 1}}}}"#));
    let out = run(&["measure", "--config", &cfg], d.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/sim"));

    // τ = 2π is not a whole number of 0.3 steps.
    let cfg = write(d.path(), "b.json", &format!(r#"{{"model": {OU}, "sim": {{"dt": 0.3}}}}"#));
    assert_eq!(run(&["measure", "--config", &cfg], d.path()).status.code(), Some(2));
}

#[test]
fn config_is_required_and_workers_positive() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(run(&["check"], d.path()).status.code(), Some(2));
    let cfg = write(d.path(), "c.json", &ou_respond(0.1));
    assert_eq!(run(&["check", "--config", &cfg, "--workers", "0"], d.path()).status.code(), Some(2));
}

#[test]
fn anti_dissipative_check_reports_failure() {
    let d = tempfile::tempdir().unwrap();
    let cfg = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/anti_dissipative.json");
    let out = run(&["check", "--config", cfg], d.path());
    assert_eq!(out.status.code(), Some(0));
    let text = std::fs::read_to_string(d.path().join("out/dissipativity_report.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["pass"], serde_json::Value::Bool(false));
    // The envelope certifies moments, but the drift violates it.
    assert_eq!(v["verification"]["pass"], serde_json::Value::Bool(false));
}

#[test]
fn respond_fills_both_columns() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "c.json", &ou_respond(0.1));
    assert_eq!(run(&["respond", "--config", &cfg], d.path()).status.code(), Some(0));
    let rows = response_columns(d.path());
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|(a, b)| !a.is_empty() && !b.is_empty()));
    assert!(rows.iter().any(|(a, _)| a.parse::<f64>().unwrap() != 0.0));
    assert!(d.path().join("out/rtable.csv").exists());
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.path().join("out/meta.json")).unwrap()).unwrap();
    assert_eq!(meta["command"], "respond");
    assert_eq!(meta["seed"], 3);
}

#[test]
fn zero_epsilon_gives_zero_response() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "c.json", &ou_respond(0.0));
    assert_eq!(run(&["respond", "--config", &cfg], d.path()).status.code(), Some(0));
    for (a, b) in response_columns(d.path()) {
        assert_eq!(a.parse::<f64>().unwrap(), 0.0);
        assert_eq!(b.parse::<f64>().unwrap(), 0.0);
    }
}

#[test]
fn direct_mode_leaves_fdt_column_empty() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "c.json", &ou_respond(0.1));
    assert_eq!(run(&["respond", "--config", &cfg, "--mode", "direct"], d.path()).status.code(), Some(0));
    assert!(response_columns(d.path()).iter().all(|(a, b)| !a.is_empty() && b.is_empty()));
}
