use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn mfglab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfglab"))
        .current_dir(dir)
        .env_remove("MFGLAB_OUTPUT_DIR")
        .args(args)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

fn stderr_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stderr).unwrap_or_else(|_| panic!("stderr is not JSON: {}", String::from_utf8_lossy(&out.stderr)))
}

const SMALL_LQ: &str = r#"{"model": {"family": "lq"}, "grid": {"nx": 120, "nt": 16}, "tree": {"depth": 4}, "variational": {"coarse_steps": 4}}"#;

#[test]
fn lq_table_matches_golden_file() {
    let d = tempfile::tempdir().unwrap();
    write(d.path(), "c.json", r#"{"model": {"family": "lq"}, "grid": {"nt": 8}}"#);
    let out = mfglab(d.path(), &["lq", "-c", "c.json", "--set", "output_dir=o"]);
    assert!(out.status.success());
    let csv = std::fs::read_to_string(d.path().join("o/riccati.csv")).unwrap();
    assert_eq!(csv, include_str!("golden/riccati_nt8.csv"));
    let first: Vec<f64> = csv.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(first[0], 0.0);
    assert!((first[1] - 0.5).abs() < 1e-15);
    assert!((first[2] + 1.0 / 6.0).abs() < 1e-15);
    let summary = String::from_utf8(out.stdout).unwrap();
    assert_eq!(summary.lines().count(), 1);
}

#[test]
fn failed_monotonicity_exits_4_with_witness() {
    let d = tempfile::tempdir().unwrap();
    write(d.path(), "c.json", r#"{"model": {"family": "lq", "parameters": {"q": 1, "kappa": 1.5}}}"#);
    let out = mfglab(d.path(), &["check-model", "-c", "c.json", "--set", "output_dir=o"]);
    assert_eq!(out.status.code(), Some(4));
    let err = stderr_json(&out);
    assert_eq!(err["exit_code"], 4);
    assert_eq!(err["error"]["kind"], "assumption");
    assert_eq!(err["error"]["witness"][0]["id"], "A4");
    assert!(d.path().join("o/assumptions.json").exists());
}

#[test]
fn config_errors_exit_2_listing_all_problems() {
    let d = tempfile::tempdir().unwrap();
    write(d.path(), "c.json", r#"{"grid": {"nt": 30}, "model": {"sigma": -1}, "sede": 3}"#);
    let out = mfglab(d.path(), &["solve0", "-c", "c.json"]);
    assert_eq!(out.status.code(), Some(2));
    let msg = stderr_json(&out)["error"]["message"].as_str().unwrap().to_string();
    for needle in ["nt = 30", "depth = 8", "model.sigma", "`sede`"] {
        assert!(msg.contains(needle), "{needle} missing from {msg}");
    }
    let missing = mfglab(d.path(), &["solve0", "-c", "nope.json"]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn unconverged_fixed_point_exits_3() {
    let d = tempfile::tempdir().unwrap();
    write(d.path(), "c.json", SMALL_LQ);
    let out = mfglab(d.path(), &["solve0", "-c", "c.json", "--set", "fixed_point.max_iters=2", "--set", "output_dir=o"]);
    assert_eq!(out.status.code(), Some(3));
    let err = stderr_json(&out);
    assert_eq!(err["error"]["kind"], "convergence");
    assert_eq!(err["error"]["residuals"].as_array().unwrap().len(), 2);
}

#[test]
fn solve0_is_byte_identical_across_runs_and_thread_counts() {
    let d = tempfile::tempdir().unwrap();
    write(d.path(), "c.json", SMALL_LQ);
    let mut outputs = Vec::new();
    for (i, workers) in ["1", "4", "1"].iter().enumerate() {
        let dir = format!("output_dir=o{i}");
        let out = mfglab(d.path(), &["solve0", "-c", "c.json", "--set", &dir, "--workers", workers, "--no-cache"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        outputs.push((
            std::fs::read(d.path().join(format!("o{i}/mfg0.csv"))).unwrap(),
            std::fs::read(d.path().join(format!("o{i}/solve0.json"))).unwrap(),
        ));
        let m: Value = serde_json::from_slice(&std::fs::read(d.path().join(format!("o{i}/manifest.json"))).unwrap()).unwrap();
        assert_eq!(m["workers"].as_u64().unwrap().to_string(), *workers);
    }
    assert!(outputs.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn cache_is_reused_and_gives_the_same_answer() {
    let d = tempfile::tempdir().unwrap();
    write(d.path(), "c.json", SMALL_LQ);
    let a = mfglab(d.path(), &["solve0", "-c", "c.json", "--set", "output_dir=o"]);
    assert!(a.status.success());
    let first = std::fs::read(d.path().join("o/mfg0.csv")).unwrap();
    let caches: Vec<_> = std::fs::read_dir(d.path().join("o/cache")).unwrap().collect();
    assert_eq!(caches.len(), 1);
    let b = mfglab(d.path(), &["solve0", "-c", "c.json", "--set", "output_dir=o", "--set", "model.eps=0.3"]);
    assert!(b.status.success());
    assert_eq!(std::fs::read(d.path().join("o/mfg0.csv")).unwrap(), first);
    assert_eq!(std::fs::read_dir(d.path().join("o/cache")).unwrap().count(), 1);
}

#[test]
fn manifest_and_output_dir_override() {
    let d = tempfile::tempdir().unwrap();
    write(d.path(), "c.json", SMALL_LQ);
    let out = Command::new(env!("CARGO_BIN_EXE_mfglab"))
        .current_dir(d.path())
        .env("MFGLAB_OUTPUT_DIR", "elsewhere")
        .args(["lq", "-c", "c.json", "--seed", "99"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let m: Value = serde_json::from_slice(&std::fs::read(d.path().join("elsewhere/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 99);
    assert_eq!(m["command"], "lq");
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
    assert!(m["wall_clock_seconds"].as_f64().unwrap() >= 0.0);
    assert_eq!(m["outputs"][0], "riccati.csv");
    assert!(m["versions"]["mfg_core"].is_string());
}

#[test]
fn help_documents_defaults() {
    let d = tempfile::tempdir().unwrap();
    let out = mfglab(d.path(), &["--help"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("Default configuration") && text.contains("\"floor_eps\""));
}

#[test]
fn remainder_sweep_on_default_config() {
    let d = tempfile::tempdir().unwrap();
    write(d.path(), "c.json", "{}");
    let out = mfglab(d.path(), &["sweep", "remainder", "-c", "c.json", "--set", "output_dir=o"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r: Value = serde_json::from_slice(&std::fs::read(d.path().join("o/sweep_remainder.json")).unwrap()).unwrap();
    assert!(r["fitted_slope"].is_number());
    assert!(r["included"].as_array().unwrap().iter().filter(|v| v.as_bool() == Some(true)).count() >= 3);
    assert!(r["discretization_floor"].as_f64().unwrap() > 0.0);
    assert!(r.get("wall_clock").is_none());
    let csv = std::fs::read_to_string(d.path().join("o/sweep_remainder.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "eps,metric,floor,included_in_fit");
    assert_eq!(csv.lines().count(), 5);
}
