//! End-to-end checks of the command-line interface.

use std::fs;
use std::path::Path;
use std::process::Command;

fn eqboot() -> Command {
    Command::new(env!("CARGO_BIN_EXE_eqboot"))
}

fn write_market(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("market.json");
    let body = serde_json::json!({
        "n": 2,
        "t": 4,
        "budgets": [0.4, 0.3],
        "values": [[0.9, 0.2], [0.4, 0.8], [0.5, 0.6], [0.7, 0.1]],
    });
    fs::write(&path, serde_json::to_string(&body).unwrap()).unwrap();
    path
}

fn write_generator(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("gen.json");
    let body = serde_json::json!({
        "n": 3,
        "t": 80,
        "value_dist": {"uniform": {"lo": 0.0, "hi": 1.0}},
        "budget_rule": {"paced_fraction": {"alpha": 0.34}},
        "seed": 5,
    });
    fs::write(&path, serde_json::to_string(&body).unwrap()).unwrap();
    path
}

#[test]
fn solve_emits_equilibrium_json() {
    let dir = tempfile::tempdir().unwrap();
    let market = write_market(dir.path());
    let out = dir.path().join("eq.json");
    let status = eqboot()
        .args(["solve", "--market"])
        .arg(&market)
        .args(["--mode", "fppe", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(doc["beta"].as_array().unwrap().len(), 2);
    for key in ["delta", "pay", "revenue", "objective", "iterations", "gap"] {
        assert!(!doc[key].is_null(), "missing field {key}");
    }
}

#[test]
fn bootstrap_output_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let generator = write_generator(dir.path());
    let run = |out: &Path| {
        let status = eqboot()
            .args(["bootstrap", "--gen"])
            .arg(&generator)
            .args([
                "--method",
                "constrained",
                "--B",
                "20",
                "--d",
                "0.3",
                "--seed",
                "9",
                "--out",
            ])
            .arg(out)
            .status()
            .unwrap();
        assert!(status.success());
    };
    let out1 = dir.path().join("b1.json");
    let out2 = dir.path().join("b2.json");
    run(&out1);
    run(&out2);
    assert_eq!(
        fs::read(&out1).unwrap(),
        fs::read(&out2).unwrap(),
        "identical invocations must produce identical bytes"
    );
}

#[test]
fn demo_failure_reports_the_construction() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fail.json");
    let status = eqboot()
        .args([
            "demo-failure",
            "--t",
            "2000",
            "--seed",
            "3",
            "--B",
            "300",
            "--out",
        ])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(doc["true_mass_at_zero"].as_f64().unwrap(), 0.5);
    assert!(doc["boot_mass_at_zero"].as_f64().unwrap() > 0.5);
}

#[test]
fn coverage_accepts_single_cell_spec() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("exp.json");
    let body = serde_json::json!({
        "generator": {
            "n": 3, "t": 60,
            "value_dist": {"uniform": {"lo": 0.0, "hi": 1.0}},
            "budget_rule": {"explicit": {"budgets": [0.05, 0.08, 0.06]}},
            "seed": 7,
        },
        "d": 0.3,
        "replicates": 10,
        "repetitions": 3,
        "t_ref": 600,
    });
    fs::write(&spec, serde_json::to_string(&body).unwrap()).unwrap();
    let out = dir.path().join("cov.json");
    let csv = dir.path().join("cov.csv");
    let status = eqboot()
        .args(["coverage", "--spec"])
        .arg(&spec)
        .arg("--out")
        .arg(&out)
        .arg("--csv")
        .arg(&csv)
        .status()
        .unwrap();
    assert!(status.success());
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(doc["cells"][0]["repetitions"].as_u64().unwrap(), 3);
    assert!(fs::read_to_string(&csv).unwrap().starts_with("d,t"));
}

#[test]
fn region_and_limit_dist_and_truth_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let generator = write_generator(dir.path());
    let out = dir.path().join("region.json");
    let status = eqboot()
        .args(["region", "--gen"])
        .arg(&generator)
        .args(["--B", "30", "--alpha", "0.1", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert!(doc["c_quantile"].as_f64().unwrap() >= 0.0);
    assert_eq!(doc["queries"][0]["member"].as_bool().unwrap(), true);

    let out = dir.path().join("limit.json");
    let status = eqboot()
        .args(["limit-dist", "--gen"])
        .arg(&generator)
        .args(["--samples", "50", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());

    let out = dir.path().join("truth.json");
    let hist = dir.path().join("truth.csv");
    let status = eqboot()
        .args(["truth", "--gen"])
        .arg(&generator)
        .args(["--R", "5", "--t-ref", "800", "--out"])
        .arg(&out)
        .arg("--hist")
        .arg(&hist)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(fs::read_to_string(&hist)
        .unwrap()
        .starts_with("coordinate,bin_left,bin_right,count"));
}

#[test]
fn usage_and_validation_errors_exit_two() {
    // unknown flag
    let status = eqboot().args(["solve", "--nope"]).status().unwrap();
    assert_eq!(status.code(), Some(2));
    // missing input file
    let status = eqboot()
        .args(["solve", "--market", "/nonexistent/m.json"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
    // both sources given
    let dir = tempfile::tempdir().unwrap();
    let market = write_market(dir.path());
    let generator = write_generator(dir.path());
    let status = eqboot()
        .args(["solve", "--market"])
        .arg(&market)
        .arg("--gen")
        .arg(&generator)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
    // help is a success
    let status = eqboot().arg("--help").status().unwrap();
    assert_eq!(status.code(), Some(0));
}

#[test]
fn csv_market_loads_by_extension() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    fs::write(&path, "budgets,0.4,0.3\n0.9,0.2\n0.4,0.8\n").unwrap();
    let status = eqboot()
        .args(["solve", "--market"])
        .arg(&path)
        .status()
        .unwrap();
    assert!(status.success());
}
