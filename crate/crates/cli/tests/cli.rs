//! End-to-end tests of the command-line binary: exit codes, output files,
//! determinism, and flag overrides, all against temporary directories.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pmsm-observer"))
}

fn write(path: &Path, text: &str) {
    fs::write(path, text).unwrap();
}

fn data_lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(String::from)
        .collect()
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const REDUCED_SCENARIO: &str = r#"
[scenario]
name = "reduced-demo"
variant = "reduced-hybrid"
reduced_chi = 1.0
horizon = 20.0
step = 1e-3
downsample = 50

[scenario.gains]
k_p = 1.0
k_i = 1.0
k_eta = 1.5
gamma = 1.0
lambda = 1.0

[scenario.init]
mode = "adversarial"
"#;

// ─────────────────────────────────────────────────────────────────────────────
// validate
// ─────────────────────────────────────────────────────────────────────────────

#[test]
fn validate_without_config_accepts_the_defaults() {
    let out = bin().arg("validate").output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    assert!(stdout_of(&out).contains("config is valid"));
}

#[test]
fn validate_rejects_a_sign_changing_profile_with_the_reason() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    write(
        &cfg,
        r#"
[scenario]
horizon = 0.01

[[scenario.segments]]
kind = "ramp"
duration = 0.01
omega_start = 100.0
omega_end = -100.0
"#,
    );
    let out = bin()
        .arg("validate")
        .arg("--config")
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let text = format!("{}{}", stdout_of(&out), stderr_of(&out));
    assert!(text.contains("constant sign"), "output was: {text}");
}

#[test]
fn a_misspelled_config_key_is_rejected_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("typo.toml");
    write(&cfg, "[scenario]\nhorizzon = 1.0\n");
    let out = bin()
        .arg("validate")
        .arg("--config")
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("horizzon"), "{}", stderr_of(&out));
}

#[test]
fn an_unknown_flag_exits_with_the_validation_code() {
    let out = bin().arg("run").arg("--bogus").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_prints_and_exits_cleanly() {
    let out = bin().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    for sub in ["run", "portrait", "compare", "sweep", "validate"] {
        assert!(stdout_of(&out).contains(sub), "help lacks {sub}");
    }
}

// ─────────────────────────────────────────────────────────────────────────────
// run
// ─────────────────────────────────────────────────────────────────────────────

#[test]
fn zero_horizon_run_writes_a_header_only_csv_and_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("zero.toml");
    write(&cfg, "[scenario]\nname = \"zh\"\nhorizon = 0.0\n");
    let out = bin()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    let lines = data_lines(&dir.path().join("zh.csv"));
    assert_eq!(lines.len(), 1, "expected only the header row");
    assert!(lines[0].starts_with("t,j,phase,"));
}

#[test]
fn a_reduced_hybrid_run_writes_trajectory_jump_log_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("scenario.toml");
    write(&cfg, REDUCED_SCENARIO);
    let out = bin()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));

    let rows = data_lines(&dir.path().join("reduced-demo.csv"));
    assert!(rows.len() > 100, "got {} rows", rows.len());
    assert_eq!(
        rows[0],
        "t,j,phase,eta1,eta2,xi_err,rho,theta_err,sigma,w1,w2,w3,w4"
    );

    // One clock jump per unit of time at lambda = 1.
    let jump_rows = data_lines(&dir.path().join("reduced-demo_jumps.csv"));
    assert_eq!(jump_rows.len() - 1, 19, "19 jumps over 20 s");

    let summary = fs::read_to_string(dir.path().join("reduced-demo_summary.txt")).unwrap();
    assert!(summary.contains("final sigma: 0"), "summary was: {summary}");
}

#[test]
fn reruns_with_the_same_config_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("scenario.toml");
    write(&cfg, REDUCED_SCENARIO);
    for sub in ["a", "b"] {
        let out = bin()
            .args(["run", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(dir.path().join(sub))
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    }
    for name in [
        "reduced-demo.csv",
        "reduced-demo_jumps.csv",
        "reduced-demo_summary.txt",
    ] {
        let a = fs::read(dir.path().join("a").join(name)).unwrap();
        let b = fs::read(dir.path().join("b").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between reruns");
    }
}

#[test]
fn downsample_and_seed_flags_override_the_scenario_and_are_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("scenario.toml");
    write(&cfg, REDUCED_SCENARIO);
    let base = bin()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("base"))
        .output()
        .unwrap();
    assert_eq!(base.status.code(), Some(0));
    let thinned = bin()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("thin"))
        .args(["--downsample", "200", "--seed", "42"])
        .output()
        .unwrap();
    assert_eq!(thinned.status.code(), Some(0));

    let base_rows = data_lines(&dir.path().join("base/reduced-demo.csv"));
    let thin_rows = data_lines(&dir.path().join("thin/reduced-demo.csv"));
    assert!(thin_rows.len() < base_rows.len() / 2);

    let echoed = fs::read_to_string(dir.path().join("thin/reduced-demo.csv")).unwrap();
    assert!(echoed.contains("# downsample = 200"));
    assert!(echoed.contains("# seed = 42"));
}

// ─────────────────────────────────────────────────────────────────────────────
// portrait
// ─────────────────────────────────────────────────────────────────────────────

#[test]
fn portrait_traces_the_manifold_through_the_antipode_and_grid_nodes_converge() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("portrait.toml");
    write(
        &cfg,
        r#"
[portrait]
theta_count = 4
xi_count = 3
horizon = 40.0
step = 2e-3
record_every = 100
"#,
    );
    let out = bin()
        .args(["portrait", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));

    // The saddle itself is a polyline vertex: eta = (-1, 0), xi_err = 0.
    let manifold = data_lines(&dir.path().join("portrait_manifold.csv"));
    assert!(manifold.len() > 10);
    assert!(
        manifold.iter().any(|l| l.starts_with("-1,0,0,")),
        "manifold lacks the saddle vertex"
    );

    let summary = fs::read_to_string(dir.path().join("portrait_summary.txt")).unwrap();
    assert!(
        summary.contains("12 of 12 grid nodes reached sigma < 1e-2"),
        "summary was: {summary}"
    );
    assert!(dir.path().join("portrait_nodes.csv").exists());
}

// ─────────────────────────────────────────────────────────────────────────────
// compare
// ─────────────────────────────────────────────────────────────────────────────

#[test]
fn a_single_variant_comparison_yields_a_single_data_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("compare.toml");
    write(
        &cfg,
        r#"
[scenario]
horizon = 0.01
step = 2e-5
downsample = 10

[[scenario.segments]]
kind = "constant"
duration = 0.01
omega = 4398.229715025711

[compare]
variants = ["hybrid"]
"#,
    );
    let out = bin()
        .args(["compare", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    let rows = data_lines(&dir.path().join("compare.csv"));
    assert_eq!(rows.len(), 2, "header plus one row: {rows:?}");
    assert!(rows[1].starts_with("hybrid,"));
    assert!(dir.path().join("compare.txt").exists());
}

#[test]
fn comparisons_reject_reduced_variants() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("compare.toml");
    write(&cfg, "[compare]\nvariants = [\"reduced\"]\n");
    let out = bin()
        .args(["compare", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("reduced"), "{}", stderr_of(&out));
}

// ─────────────────────────────────────────────────────────────────────────────
// sweep
// ─────────────────────────────────────────────────────────────────────────────

#[test]
fn sweep_writes_one_row_per_swept_epsilon() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sweep.toml");
    write(
        &cfg,
        r#"
[sweep]
samples = 2
horizon = 0.04
epsilon_list = [8.482563619227145e-5, 8.482563619227145e-6]
"#,
    );
    let out = bin()
        .args(["sweep", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    let rows = data_lines(&dir.path().join("sweep.csv"));
    assert_eq!(rows.len(), 3, "header plus two rows: {rows:?}");
    assert!(dir.path().join("sweep_summary.txt").exists());
}
