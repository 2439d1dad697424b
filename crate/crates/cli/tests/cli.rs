use std::path::Path;
use std::process::{Command, Output};

use nsf_cli::snapshot;

fn nsf(dir: &Path, config: &str, args: &[&str]) -> Output {
    let path = dir.join("run.toml");
    std::fs::write(&path, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_nsf"))
        .arg("--config")
        .arg(&path)
        .args(args)
        .output()
        .unwrap()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

const CONSTANT: &str = r#"
schema_version = 1
mode = "solve"
times = [0.05, 0.1]
[grid]
n = 16
[initial]
kind = "constant"
rho = 1.2
theta = 0.8
u = [0.0]
"#;

#[test]
fn constant_state_solve_is_flat() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = nsf(tmp.path(), CONSTANT, &["--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("diagnostics.csv")).unwrap();
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert!(rows.len() >= 3);
    for r in &rows {
        // mass, energy, entropy, production, extrema
        for c in [2, 3, 4, 7, 8, 9] {
            assert_eq!(r[c], rows[0][c], "column {c}");
        }
        assert_eq!(r[5], 0.0);
    }
    let snap = snapshot::decode(&std::fs::read(out.join("state_001.bin")).unwrap()).unwrap();
    assert_eq!((snap.dim, snap.n, snap.components.len()), (1, 16, 3));
    assert!(snap.components[0].iter().all(|&v| v == 1.2));
    let m = manifest(&out);
    assert_eq!(m["outcome"], "ok");
    assert!(m["stopping_records"][0]["t_stop"].is_null());
}

#[test]
fn degenerate_ensemble_has_identical_members() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let config = r#"
schema_version = 1
mode = "ensemble"
times = [0.0, 0.05]
[grid]
n = 16
[distribution]
sigma = 0.0
[ensemble]
members = 4
"#;
    let o = nsf(tmp.path(), config, &["--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = manifest(&out);
    let records = m["stopping_records"].as_array().unwrap();
    assert_eq!(records.len(), 4);
    assert!(records.iter().all(|r| r == &records[0]));
    let e: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("ensemble.json")).unwrap()).unwrap();
    assert_eq!(e["members"], 4);
    assert_eq!(e["blowup_fraction"], serde_json::json!([0.0, 0.0]));
}

#[test]
fn rejected_config_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = nsf(tmp.path(), "schema_version = 1\n[grid]\nn = 7\n", &["--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("grid:"));
    let o = nsf(tmp.path(), "[grid]\nn = 16\n", &["--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("schema_version"));
    assert!(!out.exists());
}

#[test]
fn unknown_key_warns() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let config = format!("colour = \"blue\"\n{CONSTANT}\n[grid.extra]\nx = 1\n");
    let o = nsf(tmp.path(), &config, &["--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("colour"));
    assert!(String::from_utf8_lossy(&o.stderr).contains("grid.extra"));
}

#[test]
fn non_empty_output_directory_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    std::fs::create_dir(&out).unwrap();
    std::fs::write(out.join("keep.txt"), "x").unwrap();
    let o = nsf(tmp.path(), CONSTANT, &["--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(std::fs::read_to_string(out.join("keep.txt")).unwrap(), "x");
}

#[test]
fn stiffness_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let config = r#"
schema_version = 1
mode = "solve"
times = [1.0]
[grid]
n = 64
[distribution]
sigma = 0.3
[params]
mu = 5.0
[solver]
fixed_step = true
dt_init = 0.05
[stopping]
dt_min = 0.01
"#;
    let o = nsf(tmp.path(), config, &["--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    let m = manifest(&out);
    assert_eq!(m["stopping_records"][0]["reason"], "Stiffness");
}

#[test]
fn replay_reproduces_hashes() {
    let tmp = tempfile::tempdir().unwrap();
    let config = r#"
schema_version = 1
mode = "ensemble"
seed = 9
times = [0.05]
[grid]
n = 16
[ensemble]
members = 6
"#;
    let first = tmp.path().join("a");
    let o = nsf(tmp.path(), config, &["--out", first.to_str().unwrap(), "--workers", "1"]);
    assert!(o.status.success());
    let second = tmp.path().join("b");
    let o = Command::new(env!("CARGO_BIN_EXE_nsf"))
        .arg("--config")
        .arg(first.join("config.resolved.toml"))
        .args(["--out", second.to_str().unwrap(), "--workers", "3"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (a, b) = (manifest(&first), manifest(&second));
    assert_eq!(a["files"], b["files"]);
    assert_eq!(a["config_hash"], b["config_hash"]);
    // a different seed changes the ensemble
    let third = tmp.path().join("c");
    let o = nsf(tmp.path(), config, &["--out", third.to_str().unwrap(), "--seed", "10"]);
    assert!(o.status.success());
    assert_ne!(manifest(&third)["files"], a["files"]);
}
