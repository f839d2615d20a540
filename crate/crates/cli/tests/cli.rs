use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn corrpath(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_corrpath"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

const CONFIG: &str = r#"
psi = [0.0, 0.5, 0.95]
trials = 150
seed = 21
engine = "dp"

[lattice]
d = 3
m = 8

[class]
k = 6
start = 0
oriented = true
"#;

fn write_config(dir: &Path) -> String {
    let p = dir.join("exp.toml");
    fs::write(&p, CONFIG).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn calibrate_reports_threshold() {
    let v = json(&corrpath(&["calibrate", "--k", "100", "--log-card", "60"]));
    let t = v["t"].as_f64().unwrap();
    assert!(t > 0.0 && v["p_t"].as_f64().unwrap() < 0.5);
    assert_eq!(v["target"].as_f64().unwrap(), 4.8);
}

#[test]
fn simulate_then_scan() {
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("s.bin");
    let bin = bin.to_str().unwrap();
    let v = json(&corrpath(&[
        "simulate",
        "--d",
        "3",
        "--m",
        "8",
        "--psi",
        "0.5",
        "--path",
        "0,1,2,3,4,5",
        "--seed",
        "9",
        "--out",
        bin,
    ]));
    assert_eq!(v["provenance"]["kind"], "alternative");
    assert_eq!(fs::metadata(bin).unwrap().len(), 512 * 8);

    let dp = json(&corrpath(&[
        "scan",
        "--input",
        bin,
        "--class",
        "k=6,start=0,oriented",
        "--engine",
        "dp",
        "--t",
        "0.7",
    ]));
    let ex = json(&corrpath(&[
        "scan",
        "--input",
        bin,
        "--class",
        "k=6,start=0,oriented",
        "--engine",
        "exhaustive",
        "--t",
        "0.7",
    ]));
    assert_eq!(dp["v_star"], ex["v_star"]);
    assert_eq!(dp["argmax_path"], ex["argmax_path"]);
    assert_eq!(dp["rejected"], dp["v_star"].as_u64().unwrap() > 3);

    let both = json(&corrpath(&[
        "scan",
        "--input",
        bin,
        "--class",
        "k=6,start=0,oriented",
        "--sign",
        "both",
    ]));
    assert_eq!(both["outcomes"].as_array().unwrap().len(), 2);
}

#[test]
fn exit_codes() {
    // validation
    let out = corrpath(&["calibrate", "--k", "1", "--log-card", "2"]);
    assert_eq!(out.status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = corrpath(&["risk-curve", "--config", &cfg, "--set", "class.k=20"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("k ≤ m"));
    // budget refusal
    let bin = dir.path().join("n.bin");
    let bin = bin.to_str().unwrap();
    json(&corrpath(&[
        "simulate", "--d", "3", "--m", "8", "--out", bin,
    ]));
    let out = corrpath(&[
        "scan",
        "--input",
        bin,
        "--class",
        "k=8,start=0,budget=100",
        "--engine",
        "exhaustive",
    ]);
    assert_eq!(out.status.code(), Some(3));
    // usage
    assert_eq!(corrpath(&["scan"]).status.code(), Some(2));
}

#[test]
fn risk_curve_is_thread_count_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let mut csvs = Vec::new();
    for threads in ["1", "4"] {
        let out = dir.path().join(format!("t{threads}"));
        json(&corrpath(&[
            "risk-curve",
            "--config",
            &cfg,
            "--threads",
            threads,
            "--out",
            out.to_str().unwrap(),
        ]));
        csvs.push(fs::read(out.join("risk.csv")).unwrap());
        let report: Value =
            serde_json::from_slice(&fs::read(out.join("risk.json")).unwrap()).unwrap();
        assert_eq!(report["config"]["seed"], 21);
        assert!(fs::read_to_string(out.join("risk.svg"))
            .unwrap()
            .contains("<polyline"));
    }
    assert_eq!(csvs[0], csvs[1]);
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let a = corrpath(&["risk-curve", "--config", &cfg, "--seed", "1"]);
    let b = corrpath(&["risk-curve", "--config", &cfg, "--set", "seed=1"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    assert!(String::from_utf8_lossy(&a.stdout).starts_with("psi,metric,"));
}

#[test]
fn eit_fit_feeds_lower_bound() {
    let dir = tempfile::tempdir().unwrap();
    let fit = dir.path().join("fit.json");
    let fit = fit.to_str().unwrap();
    let v = json(&corrpath(&[
        "eit-fit", "--d", "3", "--m", "8", "--k", "6", "--trials", "20000", "--out", fit,
    ]));
    assert!(v["eta"].as_f64().unwrap() < 1.0);
    let lb = json(&corrpath(&["lower-bound", "--psi", "0,0.03", "--eit", fit]));
    let reports = lb["reports"].as_array().unwrap();
    assert_eq!(reports.len(), 2);
    assert_eq!(reports[0]["risk_bound"], 1.0);
    assert_eq!(reports[0]["moment"]["route"], "closed_form_xi");
    assert!(lb["critical_psi"].as_f64().unwrap() > 0.0);

    let out = corrpath(&["lower-bound", "--psi", "0.2", "--eit", fit]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn moment_check_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let v = json(&corrpath(&[
        "moment-check",
        "--config",
        &cfg,
        "--set",
        "trials=3000",
    ]));
    assert_eq!(v["rows"].as_array().unwrap().len(), 3);
    assert_eq!(v["passed"], true);
}
