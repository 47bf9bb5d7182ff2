use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_delay-bsde")).args(args).output().unwrap()
}

fn run_in(command: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![command, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    let output = run(&args);
    assert!(output.status.success(), "{command} failed: {}", String::from_utf8_lossy(&output.stderr));
    output
}

fn csv_column(path: &Path, column: &str) -> Vec<String> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let idx = header.iter().position(|h| *h == column).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().to_string()).collect()
}

#[test]
fn check_constants_reports_feasible_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in("check-constants", &fixture("delay_z.json"), dir.path(), &[]);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("feasible"));
    let csv = fs::read_to_string(dir.path().join("constants.csv")).unwrap();
    assert!(csv
        .starts_with("beta,gamma,D1,D2,D3,Cp,thm21_lhs_Y,thm21_lhs_Z,contraction_lhs_Y,contraction_lhs_Z,feasible\n"));
    let lhs: f64 = csv_column(&dir.path().join("constants.csv"), "thm21_lhs_Z")[0].parse().unwrap();
    assert!((lhs - 0.642).abs() < 1e-3);
    assert_eq!(csv_column(&dir.path().join("constants.csv"), "feasible"), ["true"]);
}

#[test]
fn check_constants_grid_search() {
    let dir = tempfile::tempdir().unwrap();
    run_in(
        "check-constants",
        &fixture("delay_z.json"),
        dir.path(),
        &["--beta-grid", "0.5:2:4", "--gamma-grid", "0.25:1:4"],
    );
    assert_eq!(csv_column(&dir.path().join("constants.csv"), "beta").len(), 16);
}

#[test]
fn solve_delay_z_fixture() {
    let dir = tempfile::tempdir().unwrap();
    run_in("solve", &fixture("delay_z.json"), dir.path(), &[]);
    let y0: f64 = csv_column(&dir.path().join("summary.csv"), "meanY")[0].parse().unwrap();
    assert!((y0 - 0.025).abs() < 0.01, "{y0}");
    let sweeps = csv_column(&dir.path().join("diagnostics.csv"), "sweep");
    assert!(!sweeps.is_empty());
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 42);
    assert_eq!(manifest["command"], "solve");
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    // the embedded config is enough to re-run
    assert_eq!(manifest["config"]["horizon"], 0.5);
}

#[test]
fn identical_runs_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_in("solve", &fixture("delay_z.json"), a.path(), &["--paths", "500", "--threads", "1"]);
    run_in("solve", &fixture("delay_z.json"), b.path(), &["--paths", "500", "--threads", "3"]);
    for name in ["summary.csv", "diagnostics.csv", "verdict.txt"] {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap(), "{name}");
    }
}

#[test]
fn missing_horizon_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(fixture("delay_z.json")).unwrap().replace("\"horizon\": 0.5,", "");
    let config = dir.path().join("bad.json");
    fs::write(&config, text).unwrap();
    let out = run(&["solve", "--config", config.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("missing field `horizon`") && err.contains("line"), "{err}");
}

#[test]
fn unknown_key_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(fixture("delay_z.json")).unwrap().replace("\"seed\"", "\"sed\": 1, \"seed\"");
    let config = dir.path().join("bad.json");
    fs::write(&config, text).unwrap();
    let out = run(&["solve", "--config", config.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown field `sed`"));
}

#[test]
fn every_command_runs_on_small_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    let cases: &[(&str, &str, &[&str], &str)] = &[
        ("variational", "delay_z.json", &["--paths", "500"], "variational.csv"),
        ("compare-z", "delay_z.json", &["--paths", "500"], "compare_z.csv"),
        ("fd-check", "square.json", &["--paths", "500"], "fd.csv"),
        ("study-picard", "delay_z.json", &["--paths", "500"], "picard.csv"),
        ("study-l2reg", "square.json", &["--paths", "500", "--steps", "40", "--meshes", "5,10,20"], "l2reg.csv"),
        ("study-yinc", "square.json", &["--paths", "500", "--meshes", "1,2,4"], "yinc.csv"),
        ("study-apriori", "delay_z.json", &["--paths", "500"], "apriori.csv"),
    ];
    for (command, config, extra, csv) in cases {
        let out = dir.path().join(command);
        run_in(command, &fixture(config), &out, extra);
        assert!(out.join(csv).exists(), "{command}");
        let verdict = fs::read_to_string(out.join("verdict.txt")).unwrap();
        assert_eq!(verdict.lines().count(), 1, "{command}");
        assert!(out.join("manifest.json").exists());
    }
}
