//! End-to-end checks of the binary: exit codes, report layout, field IO and
//! run-to-run determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn aqx() -> Command {
    Command::new(env!("CARGO_BIN_EXE_aqx"))
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

const BASE: &str = r#"
seed = 7

[dimensions]
n = 2
d = 2
l = 1

[operator]
kind = "divergence_perturbed"
a = "min(3/4 + sin(2*pi*x1)/4, 1 - 1e-9)"

[integrand]
f = "(xi1^2 + xi2^2 - 1)^2"
p = 4.0
c = 10.0

[grids]
macro = [8, 8]
micro = [16, 16]

[solver]
random_starts = 4

[twoscale]
eps = "1/2,1/4"
micro = [8, 8]
x_band = 3
y_band = 2

[fields]
u = ["0", "0"]
"#;

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

#[test]
fn rank_reports_one_for_the_perturbed_divergence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.toml", BASE);
    let out = run(aqx().args(["rank", "--config"]).arg(&cfg));
    assert!(out.status.success(), "{out:?}");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("rank: 1"), "{stdout}");
}

#[test]
fn envelope_at_the_origin_is_small_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.toml", BASE);
    let mut bodies = Vec::new();
    let out_json = dir.path().join("envelope.json");
    for _ in 0..2 {
        let out = run(aqx()
            .args(["envelope", "--config"])
            .arg(&cfg)
            .args(["--x", "0.25,0.5", "--xi", "0,0", "--out"])
            .arg(&out_json));
        assert!(out.status.success(), "{out:?}");
        let report: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&out_json).unwrap()).unwrap();
        let value = report["body"]["points"][0]["value"].as_f64().unwrap();
        assert!(value <= 5e-3, "envelope at origin {value}");
        // minimizer written next to the report
        let minimizer = report["body"]["points"][0]["minimizer"].as_str().unwrap();
        assert!(Path::new(minimizer).exists());
        bodies.push(serde_json::to_string(&report["body"]).unwrap());
    }
    // bit-identical bodies across runs with the same config and seed
    assert_eq!(bodies[0], bodies[1]);
}

#[test]
fn malformed_expression_exits_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "bad.toml",
        &BASE.replace("(xi1^2 + xi2^2 - 1)^2", "xi1^"),
    );
    let out = run(aqx()
        .args(["envelope", "--config"])
        .arg(&cfg)
        .args(["--x", "0.25,0.5", "--xi", "0,0", "--out"])
        .arg(dir.path().join("r.json")));
    assert_eq!(out.status.code(), Some(1), "{out:?}");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("byte 4"), "{stderr}");
}

#[test]
fn rank_violation_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "varying.toml",
        r#"
seed = 7

[dimensions]
n = 2
d = 2
l = 1

[operator]
kind = "custom"
coeffs = [ [["1", "0"]], [["0", "0"]] ]

[grids]
macro = [8, 8]
micro = [16, 16]
"#,
    );
    let out = run(aqx().args(["rank", "--config"]).arg(&cfg));
    assert_eq!(out.status.code(), Some(2), "{out:?}");
}

#[test]
fn project_round_trips_fields_through_aqxf() {
    use aqx_core::spectral::{aqxf, Grid, PeriodicField};
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.toml", BASE);
    let grid = Grid::new(&[16, 16]).unwrap();
    let psi = PeriodicField::from_fn(grid, 2, |y, out| {
        out[0] = (2.0 * std::f64::consts::PI * y[0]).sin();
        out[1] = 1.0 + (2.0 * std::f64::consts::PI * (y[0] + y[1])).cos();
    });
    let input = dir.path().join("psi.aqxf");
    aqxf::write_field(&input, &psi).unwrap();
    let output = dir.path().join("proj.aqxf");
    let report = dir.path().join("proj.json");
    let out = run(aqx()
        .args(["project", "--config"])
        .arg(&cfg)
        .arg("--in")
        .arg(&input)
        .args(["--x", "0.25,0.5", "--out"])
        .arg(&output)
        .arg("--report")
        .arg(&report));
    assert!(out.status.success(), "{out:?}");
    let proj = aqxf::read_field(&output).unwrap();
    assert_eq!(proj.grid().dims(), &[16, 16]);
    // projection removed the mean
    assert!(proj.mean().iter().all(|m| m.abs() < 1e-12));
    let rep: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(rep["body"]["ay_residual"].as_f64().unwrap() < 1e-10);
    assert!(rep["body"]["idempotency_gap"].as_f64().unwrap() < 1e-10);
}

#[test]
fn twoscale_residual_report_has_decreasing_trend() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.toml", BASE);
    let out_json = dir.path().join("ts.json");
    let out = run(aqx()
        .args(["twoscale", "--config"])
        .arg(&cfg)
        .args(["--mode", "residual", "--eps", "1/4,1/8,1/16", "--out"])
        .arg(&out_json));
    assert!(out.status.success(), "{out:?}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out_json).unwrap()).unwrap();
    let rows = report["body"]["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    let res: Vec<f64> = rows
        .iter()
        .map(|r| r["constraint_residual"].as_f64().unwrap())
        .collect();
    assert!(res[1] < res[0] && res[2] < res[1], "{res:?}");
}

#[test]
fn fhom_writes_csv_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "cfg.toml",
        &BASE.replace(
            "f = \"(xi1^2 + xi2^2 - 1)^2\"",
            "f = \"(2 + sin(2*pi*y1))*(xi1^2 + xi2^2)\"\ny_band = 1",
        ),
    );
    let out_json = dir.path().join("fhom.json");
    let csv = dir.path().join("trace.csv");
    let out = run(aqx()
        .args(["fhom", "--config"])
        .arg(&cfg)
        .args(["--x", "0.3,0.6", "--xi", "0,1", "--out"])
        .arg(&out_json)
        .arg("--csv")
        .arg(&csv));
    assert!(out.status.success(), "{out:?}");
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "n,value,residual");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4); // n = 1, 2, 4, 8
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out_json).unwrap()).unwrap();
    let values: Vec<f64> = report["body"]["values"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    for w in values.windows(2) {
        assert!(w[1] <= w[0] + 1e-9, "{values:?}");
    }
    // closed form: the harmonic mean sqrt(3)
    let est = report["body"]["fhom_estimate"].as_f64().unwrap();
    assert!((est - 3.0f64.sqrt()).abs() < 5e-3, "estimate {est}");
}

#[test]
fn ehom_reports_infeasible_macro_fields() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "cfg.toml",
        &BASE.replace(
            "u = [\"0\", \"0\"]",
            "u = [\"sin(2*pi*x1)\", \"0\"]",
        ),
    );
    let out_json = dir.path().join("ehom.json");
    let out = run(aqx()
        .args(["ehom", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_json));
    assert!(out.status.success(), "{out:?}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out_json).unwrap()).unwrap();
    assert_eq!(report["body"]["feasible"].as_bool().unwrap(), false);
}
