use std::path::Path;
use std::process::Command;

use jko_cli::experiment::RowStatus;
use jko_cli::{run_experiment, validate_config, ExperimentConfig, Level};

const BASE: &str = r#"
schema_version = 1
name = "test"
seed = 3
output_dir = "out"
cost = "quadratic"

[domain]
lower = [0.0]
upper = [1.0]

[initial]
kind = "uniform"

[jko]
t_end = 0.02
eps = { rule = "tau_squared", value = 25.0 }
debias = true

[oracle]
kind = "fd"
dt = 1e-4

[sweep]
taus = [1e-2]
resolutions = [24]
"#;

fn config(text: &str, out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::from_toml(text).unwrap();
    c.output_dir = out.to_path_buf();
    c
}

#[test]
fn uniform_heat_is_a_fixed_point() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_experiment(&config(BASE, dir.path())).unwrap();
    assert_eq!(out.report.rows.len(), 1);
    let m = out.report.rows[0].metrics.as_ref().unwrap();
    assert!(m.l1_error < 1e-8, "{}", m.l1_error);
    for f in ["report.json", "report.csv", "timings.csv"] {
        assert!(dir.path().join(f).exists());
    }
}

#[test]
fn row_count_is_the_sweep_product() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(BASE, dir.path());
    c.sweep.taus = vec![1e-2, 5e-3];
    c.sweep.resolutions = vec![12, 16, 20];
    let out = run_experiment(&c).unwrap();
    assert_eq!(out.report.rows.len(), 6);
    assert!(out
        .report
        .rows
        .iter()
        .all(|r| r.status == RowStatus::Ok && r.metrics.is_some()));
}

#[test]
fn cosine_heat_error_is_nonincreasing_in_tau() {
    let dir = tempfile::tempdir().unwrap();
    let text = BASE
        .replace("kind = \"uniform\"", "kind = \"cosine\"\namplitude = 0.5")
        .replace("t_end = 0.02", "t_end = 0.1")
        .replace("dt = 1e-4", "dt = 1e-5")
        .replace("debias = true\n", "")
        .replace("taus = [1e-2]", "taus = [8e-3, 4e-3, 2e-3]")
        .replace("resolutions = [24]", "resolutions = [128]");
    let out = run_experiment(&config(&text, dir.path())).unwrap();
    let errs: Vec<f64> = out
        .report
        .rows
        .iter()
        .map(|r| r.metrics.as_ref().unwrap().l1_error)
        .collect();
    assert!(errs.windows(2).all(|w| w[1] <= w[0]), "{errs:?}");
}

#[test]
fn reports_are_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let text = BASE.replace("kind = \"uniform\"", "kind = \"cosine\"\namplitude = 0.3");
    run_experiment(&config(&text, a.path())).unwrap();
    run_experiment(&config(&text, b.path())).unwrap();
    for f in ["report.json", "report.csv"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert_eq!(x, y, "{f} differs");
    }
}

#[test]
fn failed_rows_carry_a_reason() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(BASE, dir.path());
    // An explicit oracle step far beyond the stability limit fails every row.
    c.oracle = jko_cli::config::OracleSpec::Fd {
        dt: 1e-2,
        scheme: jko_cli::config::SchemeSpec::Explicit,
        upwind: false,
    };
    let out = run_experiment(&c).unwrap();
    let row = &out.report.rows[0];
    assert_eq!(row.status, RowStatus::Failed);
    assert!(row.metrics.is_none());
    assert!(row.reason.as_deref().unwrap().contains("oracle"));
}

#[test]
fn quadratic_config_validates_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let diags = validate_config(&config(BASE, dir.path()));
    assert!(diags.iter().all(|d| d.level == Level::Info), "{diags:?}");
    let comp = diags
        .iter()
        .find(|d| d.message.starts_with("comparability"))
        .unwrap();
    assert!(
        comp.message.contains("lambda 5.0000e-1, Lambda 5.0000e-1"),
        "{}",
        comp.message
    );
}

#[test]
fn degenerate_bregman_potential_warns() {
    let dir = tempfile::tempdir().unwrap();
    let text = BASE
        .replace("cost = \"quadratic\"", "cost = \"bregman:quartic\"")
        .replace("lower = [0.0]", "lower = [-1.0]");
    let diags = validate_config(&config(&text, dir.path()));
    assert!(
        diags
            .iter()
            .any(|d| d.level == Level::Warning && d.message.contains("lambda")),
        "{diags:?}"
    );
    assert!(
        diags
            .iter()
            .any(|d| d.level == Level::Warning && d.message.contains("D^2 phi")),
        "{diags:?}"
    );
}

#[test]
fn sub_grid_eps_warns() {
    let dir = tempfile::tempdir().unwrap();
    let text = BASE
        .replace("taus = [1e-2]", "taus = [1e-3]")
        .replace("resolutions = [24]", "resolutions = [24, 256]");
    let diags = validate_config(&config(&text, dir.path()));
    let warned: Vec<_> = diags
        .iter()
        .filter(|d| d.message.contains("barely move"))
        .collect();
    assert_eq!(warned.len(), 1, "{diags:?}");
    assert!(
        warned[0].message.contains("resolution 24;"),
        "{}",
        warned[0].message
    );
}

#[test]
fn missing_potential_is_a_single_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = BASE.replace("cost = \"quadratic\"", "cost = \"bregman:nonexistent\"");
    let diags = validate_config(&config(&text, dir.path()));
    assert_eq!(diags.len(), 1);
    assert_eq!(diags[0].level, Level::Error);
    assert!(diags[0].message.contains("nonexistent"));
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.toml");
    std::fs::write(&good, BASE).unwrap();
    let bin = env!("CARGO_BIN_EXE_jko");
    let status = Command::new(bin)
        .args(["validate", good.to_str().unwrap()])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let status = Command::new(bin)
        .args(["run", good.to_str().unwrap()])
        .output()
        .unwrap()
        .status;
    assert_eq!(status.code(), Some(0));
    assert!(dir.path().join("out/report.json").exists());

    let bad = dir.path().join("bad.toml");
    std::fs::write(
        &bad,
        BASE.replace(
            "kind = \"fd\"\ndt = 1e-4",
            "kind = \"fd\"\ndt = 1e-2\nscheme = \"explicit\"",
        ),
    )
    .unwrap();
    let status = Command::new(bin)
        .args(["run", bad.to_str().unwrap()])
        .output()
        .unwrap()
        .status;
    assert_eq!(status.code(), Some(2));

    let status = Command::new(bin)
        .args(["oracle", good.to_str().unwrap()])
        .output()
        .unwrap()
        .status;
    assert_eq!(status.code(), Some(0));
    assert!(dir.path().join("out/oracle_n_24/final.csv").exists());
}
