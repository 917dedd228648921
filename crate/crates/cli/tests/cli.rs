use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use robomill::config::Overrides;
use robomill_cli::{
    cmd_compensate, cmd_simulate, load_scenario, read_trace, run_pipeline, simulate_path, verify_report, CliError,
};

fn scenario() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios/kr270_milling.toml")
}

/// Long enough for the tool to be fully inside the stock for 0.15 s.
fn short() -> Overrides {
    Overrides { dt: None, duration: Some(0.45), grid_step: Some(1e-4) }
}

fn first_line(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap_or_default().to_string()
}

#[test]
fn missing_parameter_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(scenario()).unwrap().replace("k0 = 5.0e6\n", "");
    let path = dir.path().join("broken.toml");
    fs::write(&path, text).unwrap();
    let err = load_scenario(&path, &Overrides::default()).unwrap_err();
    assert!(matches!(err, CliError::Config(_)), "{err}");
    assert!(err.to_string().contains("k0"), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn missing_scenario_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = cmd_simulate(&dir.path().join("absent.toml"), dir.path(), &Overrides::default()).unwrap_err();
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn overrides_change_the_fingerprint() {
    let a = load_scenario(&scenario(), &Overrides::default()).unwrap();
    let b = load_scenario(&scenario(), &short()).unwrap();
    assert_eq!(a.config_sha256.len(), 64);
    assert_ne!(a.config_sha256, b.config_sha256);
    assert_eq!(b.config_sha256, load_scenario(&scenario(), &short()).unwrap().config_sha256);
}

#[test]
fn simulate_is_deterministic_and_fingerprinted() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = cmd_simulate(&scenario(), a.path(), &short()).unwrap();
    let rb = cmd_simulate(&scenario(), b.path(), &short()).unwrap();
    assert_eq!(ra.config_sha256, rb.config_sha256);
    assert_eq!(fs::read(a.path().join("trace.csv")).unwrap(), fs::read(b.path().join("trace.csv")).unwrap());
    for name in ["trace.csv", "spectrum.csv", "profile.csv", "grid.rle"] {
        assert_eq!(first_line(&a.path().join(name)), format!("# config_sha256: {}", ra.config_sha256), "{name}");
    }
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(json["config_sha256"], ra.config_sha256.as_str());

    let trace = read_trace(&a.path().join("trace.csv")).unwrap();
    assert_eq!(trace.teeth, 4);
    assert_eq!(trace.rows.len(), ra.diagnostics.steps + 1);
}

#[test]
fn trace_from_another_configuration_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    cmd_simulate(&scenario(), dir.path(), &short()).unwrap();
    let err = cmd_compensate(&scenario(), &dir.path().join("trace.csv"), &dir.path().join("comp"), &Overrides::default())
        .unwrap_err();
    assert!(matches!(err, CliError::Mismatch(_)), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn nominal_path_verifies_as_unchanged() {
    let loaded = load_scenario(&scenario(), &short()).unwrap();
    let before = simulate_path(&loaded, None).unwrap();
    let after = simulate_path(&loaded, Some(loaded.file.scenario.path.clone())).unwrap();
    let report = verify_report(&loaded.config_sha256, before.report, after.report);
    assert_eq!(report.static_deviation_reduction, 0.0);
    assert_eq!(report.max_deviation_reduction, 0.0);
    assert_eq!(report.low_frequency_shift, 0.0);
}

#[test]
fn compensation_mirrors_the_quasi_static_deflection() {
    let loaded = load_scenario(&scenario(), &short()).unwrap();
    let pipe = run_pipeline(&loaded).unwrap();
    let path = &loaded.file.scenario.path;
    let dev = &pipe.nominal.deviation;
    let window: Vec<_> = pipe
        .compensated
        .samples
        .iter()
        .filter(|s| s.t >= dev.window_start && s.t <= dev.window_end)
        .collect();
    assert!(!window.is_empty());
    let offset = window.iter().map(|s| s.position.y - path.at(s.t).y).sum::<f64>() / window.len() as f64;
    assert!(dev.static_deviation_signed.abs() > 1e-6);
    assert!(offset * dev.static_deviation_signed < 0.0, "offset {offset:e}, deviation {:e}", dev.static_deviation_signed);
    assert!(pipe.report.after.static_deviation < pipe.report.before.static_deviation);
}

#[test]
fn binary_runs_the_three_stages() {
    let dir = tempfile::tempdir().unwrap();
    let out = |sub: &str| dir.path().join(sub);
    let bin = env!("CARGO_BIN_EXE_robomill");
    let flags = ["--duration", "0.45", "--grid-step", "1e-4"];

    let status = Command::new(bin).arg("simulate").arg(scenario()).arg("-o").arg(out("sim")).args(flags).output().unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    assert!(String::from_utf8_lossy(&status.stdout).contains("static deviation"));

    let status = Command::new(bin)
        .arg("compensate")
        .arg(scenario())
        .arg(out("sim/trace.csv"))
        .arg("-o")
        .arg(out("comp"))
        .args(flags)
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let hash = first_line(&out("sim/trace.csv"));
    assert_eq!(first_line(&out("comp/compensated.csv")), hash);
    assert_eq!(first_line(&out("comp/compensation.log")), hash);

    let status = Command::new(bin)
        .arg("verify")
        .arg(scenario())
        .arg(out("comp/compensated.csv"))
        .arg("-o")
        .arg(out("verify"))
        .args(flags)
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    for name in ["before_trace.csv", "after_trace.csv", "after_profile.csv"] {
        assert_eq!(first_line(&out("verify").join(name)), hash, "{name}");
    }
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out("verify/verify_report.json")).unwrap()).unwrap();
    assert!(json["static_deviation_reduction"].as_f64().unwrap() > 0.5);

    // mismatched compensation input
    let status = Command::new(bin)
        .arg("verify")
        .arg(scenario())
        .arg(out("comp/compensated.csv"))
        .arg("-o")
        .arg(out("other"))
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&status.stderr).starts_with("error: "));
}
