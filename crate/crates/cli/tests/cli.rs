use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use recomb_core::partitioning_process::EmpiricalDistribution;
use recomb_core::{GroundSet, Trajectory};
use serde_json::Value;
use tempfile::TempDir;

fn recomb(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_recomb"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn scenario(dir: &TempDir, name: &str, body: &str) -> PathBuf {
    let path = dir.path().join(name);
    fs::write(&path, body).unwrap();
    path
}

fn run(dir: &TempDir, cmd: &str, config: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--config", config.to_str().unwrap(), "--out", out];
    args.extend_from_slice(extra);
    recomb(&args, dir.path())
}

fn json(path: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const GENERIC3: &str = r#"{"n": 3, "rates": {"1|2|3": 0.4, "1|2,3": 0.3, "1,2|3": 0.5, "1,3|2": 0.2},
  "initial_measure": "product:0.2,0.8;0.5,0.5;0.7,0.3", "grid": {"start": 0, "end": 3, "points": 4},
  "monte_carlo": {"samples": 50000, "seed": 11, "time": 1.0}}"#;

#[test]
fn lattice_counts() {
    let dir = TempDir::new().unwrap();
    let out = recomb(&["lattice", "4"], dir.path());
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout), "n,bell,two_block\n4,15,7\n");
    let out = recomb(&["lattice", "8", "--format", "json"], dir.path());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["bell"], 4140);
    let out = recomb(&["lattice", "1"], dir.path());
    assert!(String::from_utf8_lossy(&out.stdout).contains("1,1,0"));
    let out = recomb(&["lattice", "4", "--enumerate", "--format", "json"], dir.path());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let parts = v["partitions"].as_array().unwrap();
    assert_eq!(parts.len(), 15);
    assert_eq!(parts[0]["key"], "1,2,3,4");
    assert_eq!(parts[0]["mobius_from_bottom"], -6);
    assert_eq!(recomb(&["lattice", "0"], dir.path()).status.code(), Some(2));
    assert_eq!(recomb(&["lattice", "11"], dir.path()).status.code(), Some(2));
}

#[test]
fn config_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let cfg = scenario(&dir, "bad.json", r#"{"n": 3, "rates": {"1|2": 1.0}}"#);
    assert_eq!(run(&dir, "solve", &cfg, "o", &[]).status.code(), Some(2));
    let cfg = scenario(&dir, "nomc.json", r#"{"n": 3}"#);
    assert_eq!(run(&dir, "simulate", &cfg, "o", &[]).status.code(), Some(2));
    let cfg = scenario(&dir, "rated.json", r#"{"n": 3, "rates": {"1|2|3": 1.0}}"#);
    assert_eq!(run(&dir, "integrate", &cfg, "o", &["--step", "10"]).status.code(), Some(2));
    assert_eq!(recomb(&["solve"], dir.path()).status.code(), Some(2));
    assert_eq!(recomb(&["bogus"], dir.path()).status.code(), Some(2));
}

#[test]
fn solve_zero_rates_is_constant() {
    let dir = TempDir::new().unwrap();
    let cfg = scenario(&dir, "zero.json", r#"{"n": 3, "grid": {"end": 5, "points": 6}}"#);
    assert!(run(&dir, "solve", &cfg, "o", &[]).status.success());
    let f = fs::File::open(dir.path().join("o/solution_trajectory.csv")).unwrap();
    let traj = Trajectory::read_csv(f, GroundSet::range(3).unwrap()).unwrap();
    for s in &traj.states {
        assert_eq!(s.values(), &[1.0, 0.0, 0.0, 0.0, 0.0]);
    }
}

#[test]
fn solve_single_rate_decays() {
    let dir = TempDir::new().unwrap();
    let cfg = scenario(&dir, "s.json", r#"{"n": 3, "rates": {"1|2|3": 1.0}, "grid": {"end": 4, "points": 9}}"#);
    assert!(run(&dir, "solve", &cfg, "o", &[]).status.success());
    let f = fs::File::open(dir.path().join("o/solution_trajectory.csv")).unwrap();
    let traj = Trajectory::read_csv(f, GroundSet::range(3).unwrap()).unwrap();
    for (t, s) in traj.times.iter().zip(&traj.states) {
        assert!((s.values()[0] - (-t as f64).exp()).abs() < 1e-14);
    }
    let sol = json(dir.path().join("o/solution.json"));
    assert_eq!(sol["subsets"].as_array().unwrap().len(), 7);
}

#[test]
fn solve_degenerate_exits_3() {
    let dir = TempDir::new().unwrap();
    let cfg = scenario(
        &dir,
        "d.json",
        r#"{"n": 4, "rates": {"1|2|3|4": 1.0, "1,2|3,4": 1.0}, "grid": {"end": 2, "points": 3},
            "monte_carlo": {"samples": 20000, "seed": 3}}"#,
    );
    assert_eq!(run(&dir, "solve", &cfg, "o", &[]).status.code(), Some(3));
    let report = json(dir.path().join("o/degeneracy.json"));
    assert_eq!(report["status"], "degenerate");
    assert!(report["bad"].as_u64().unwrap() >= 1);
    let out = run(&dir, "compare", &cfg, "c", &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cmp = json(dir.path().join("c/comparison.json"));
    assert_eq!(cmp["fallback"], "numerical");
    assert_eq!(cmp["pass"], true);
}

#[test]
fn integrate_outputs_round_trip() {
    let dir = TempDir::new().unwrap();
    let cfg = scenario(&dir, "g.json", GENERIC3);
    assert!(run(&dir, "integrate", &cfg, "o", &[]).status.success());
    let text = fs::read_to_string(dir.path().join("o/coefficients.csv")).unwrap();
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().unwrap().clone();
    assert_eq!(header.get(0), Some("t"));
    assert_eq!(header.get(header.len() - 1), Some("drift"));
    for rec in r.records() {
        let rec = rec.unwrap();
        let values: Vec<f64> = rec.iter().map(|x| x.parse().unwrap()).collect();
        // shortest round-trip formatting re-prints identically
        for (x, s) in values.iter().zip(rec.iter()) {
            assert_eq!(x.to_string(), s);
        }
        assert!(*values.last().unwrap() <= 1e-10);
        let sum: f64 = values[1..values.len() - 1].iter().sum();
        assert!((sum - 1.0).abs() < 1e-10);
    }
    let text = fs::read_to_string(dir.path().join("o/measure_trajectory.csv")).unwrap();
    let mut r = csv::Reader::from_reader(text.as_bytes());
    assert_eq!(r.headers().unwrap().len(), 1 + 8 + 2);
    for rec in r.records() {
        let dev: f64 = rec.unwrap().iter().last().unwrap().parse().unwrap();
        assert!(dev <= 1e-10);
    }
    let meta = json(dir.path().join("o/integration.json"));
    assert!(meta["max_drift"].as_f64().unwrap() <= 1e-10);
}

#[test]
fn zero_rates_integrate_constant() {
    let dir = TempDir::new().unwrap();
    let cfg = scenario(&dir, "z.json", r#"{"n": 2, "initial_measure": "uniform"}"#);
    assert!(run(&dir, "integrate", &cfg, "o", &["--format", "json"]).status.success());
    let v = json(dir.path().join("o/coefficients.json"));
    for row in v["rows"].as_array().unwrap() {
        assert_eq!(row[1], 1.0);
        assert_eq!(row[2], 0.0);
    }
}

#[test]
fn simulate_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let cfg = scenario(&dir, "g.json", GENERIC3);
    assert!(run(&dir, "simulate", &cfg, "a", &[]).status.success());
    assert!(run(&dir, "simulate", &cfg, "b", &[]).status.success());
    let a = fs::read(dir.path().join("a/empirical.csv")).unwrap();
    let b = fs::read(dir.path().join("b/empirical.csv")).unwrap();
    assert_eq!(a, b);
    let est = EmpiricalDistribution::read_csv(a.as_slice(), GroundSet::range(3).unwrap()).unwrap();
    assert_eq!(est.total(), 50_000);
    let meta = json(dir.path().join("a/empirical_metadata.json"));
    assert_eq!(meta["generator"], "ChaCha8Rng");
    assert_eq!(meta["seed"], 11);
    assert!(run(&dir, "simulate", &cfg, "c", &["--seed", "12"]).status.success());
    assert_ne!(a, fs::read(dir.path().join("c/empirical.csv")).unwrap());
    assert!(run(&dir, "simulate", &cfg, "d", &["--samples", "1"]).status.success());
    let one = fs::read_to_string(dir.path().join("d/empirical.csv")).unwrap();
    assert_eq!(one.lines().count(), 2);
}

#[test]
fn simulate_two_sites() {
    let dir = TempDir::new().unwrap();
    let cfg = scenario(
        &dir,
        "two.json",
        r#"{"n": 2, "rates": {"1|2": 1.0}, "monte_carlo": {"samples": 100000, "seed": 5, "time": 1.0}}"#,
    );
    assert!(run(&dir, "simulate", &cfg, "o", &["--format", "json"]).status.success());
    let v = json(dir.path().join("o/empirical.json"));
    let row = v["rows"].as_array().unwrap().iter().find(|r| r["key"] == "1,2").unwrap();
    let f = row["frequency"].as_f64().unwrap();
    let p = (-1.0f64).exp();
    assert!((f - p).abs() <= 3.0 * (p * (1.0 - p) / 1e5).sqrt());
}

#[test]
fn compare_generic_passes() {
    let dir = TempDir::new().unwrap();
    let cfg = scenario(&dir, "g.json", GENERIC3);
    let out = run(&dir, "compare", &cfg, "o", &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let v = json(dir.path().join("o/comparison.json"));
    assert_eq!(v["pass"], true);
    assert_eq!(v["fallback"], Value::Null);
    assert_eq!(v["linear_regime"], true);
    assert_eq!(v["points"].as_array().unwrap().len(), 4);
}

#[test]
fn compare_single_crossover_is_linear() {
    let dir = TempDir::new().unwrap();
    let cfg = scenario(
        &dir,
        "sc.json",
        r#"{"n": 4, "two_block_only": true, "rates": {"1|2,3,4": 0.3, "1,2|3,4": 0.6, "1,2,3|4": 0.2}}"#,
    );
    assert!(run(&dir, "compare", &cfg, "o", &[]).status.success());
    let v = json(dir.path().join("o/comparison.json"));
    assert_eq!(v["linear_regime"], true);
    assert_eq!(v["pass"], true);
}

#[test]
fn compare_tolerance_failure_exits_4() {
    let dir = TempDir::new().unwrap();
    let cfg = scenario(
        &dir,
        "t.json",
        r#"{"n": 3, "rates": {"1|2|3": 0.4, "1,2|3": 0.5, "1|2,3": 0.3, "1,3|2": 0.2},
            "monte_carlo": {"samples": 100, "seed": 1}, "tolerances": {"monte_carlo_tv": 0.0}}"#,
    );
    assert_eq!(run(&dir, "compare", &cfg, "o", &[]).status.code(), Some(4));
    assert_eq!(json(dir.path().join("o/comparison.json"))["pass"], false);
}
