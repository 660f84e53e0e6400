use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

fn quasispec(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_quasispec"))
        .args(args)
        .arg("--output")
        .arg(out)
        .env_remove("QUASISPEC_THREADS")
        .output()
        .expect("binary runs")
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn write_potential(dir: &Path, body: &str) -> String {
    let p = dir.join("v.json");
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

fn csv_rows(path: &Path) -> Vec<BTreeMap<String, String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let headers = r.headers().unwrap().clone();
    r.records()
        .map(|rec| headers.iter().zip(rec.unwrap().iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect())
        .collect()
}

fn assert_hashes(dir: &Path) {
    let m = manifest(dir);
    for f in m["files"].as_array().unwrap() {
        let bytes = std::fs::read(dir.join(f["path"].as_str().unwrap())).unwrap();
        let hex: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(f["sha256"].as_str().unwrap(), hex);
        assert_eq!(f["bytes"].as_u64().unwrap() as usize, bytes.len());
    }
}

#[test]
fn lattice_best_rational_row() {
    let tmp = tempfile::tempdir().unwrap();
    let out = quasispec(&["lattice"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = csv_rows(&tmp.path().join("best_rational.csv"));
    let row = rows.iter().find(|r| r["q_bound"] == "13").unwrap();
    assert_eq!((row["q"].as_str(), row["p"].as_str()), ("13", "-8"));
    // α - (-(-8))/13 with α the fractional golden mean
    let eps: f64 = row["eps_q"].parse().unwrap();
    assert!((eps.abs() - ((5f64.sqrt() - 1.0) / 2.0 - 8.0 / 13.0).abs()).abs() < 1e-15);

    let idx = csv_rows(&tmp.path().join("indices.csv"));
    for r in &idx {
        let f = |k: &str| r[k].parse::<f64>().unwrap();
        let n = f("s1x").hypot(f("s1y")) + f("s2x").hypot(f("s2y"));
        assert!((f("pnorm") - n).abs() < 1e-12);
        assert!((f("pabs") - f("px").hypot(f("py"))).abs() < 1e-9);
    }
    assert_hashes(tmp.path());
}

#[test]
fn paper_mode_rejects_rational_alpha() {
    let tmp = tempfile::tempdir().unwrap();
    let out = quasispec(&["lattice", "--mode", "paper", "--alpha", "\"0.5\""], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("$.alpha"));
}

#[test]
fn config_errors_are_aggregated() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    std::fs::write(&cfg, r#"{"mu": "two", "bogus": 1, "regions": {"gamma": "x"}}"#).unwrap();
    let out = quasispec(&["lattice", "--config", cfg.to_str().unwrap()], &tmp.path().join("o"));
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    for path in ["$.mu", "$.bogus", "$.regions.gamma"] {
        assert!(err.contains(path), "{path} missing from {err}");
    }
}

#[test]
fn regions_counts_match_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let out = quasispec(&["regions"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = csv_rows(&tmp.path().join("regions.csv"));
    let mut seen: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for r in &rows {
        if r["color"] == "outside" {
            assert!(r["component_id"].is_empty());
        } else {
            seen.entry(r["color"].clone()).or_default().insert(r["component_id"].clone());
        }
    }
    let m = manifest(tmp.path());
    for (color, n) in m["summary"]["component_counts"].as_object().unwrap() {
        let want = seen.get(color).map_or(0, |s| s.len());
        assert_eq!(n.as_u64().unwrap() as usize, want, "color {color}");
    }
    assert_eq!(m["summary"]["block_structure_ok"], Value::Bool(true));
    assert_hashes(tmp.path());
}

#[test]
fn regions_block_leak_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let pot = write_potential(tmp.path(), r#"{"Q": 7, "terms": [{"s1": [0, 0], "s2": [6, -2], "re": 0.01}]}"#);
    let dir = tmp.path().join("o");
    let out = quasispec(&["regions", "--potential", &pot, "--set", "regions.phi0=2.82"], &dir);
    assert_eq!(out.status.code(), Some(4));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("block_report.json")).unwrap()).unwrap();
    assert_eq!(report["ok"], Value::Bool(false));
    let m = manifest(&dir);
    assert_eq!(m["partial"], Value::Bool(true));
    assert_eq!(m["exit_code"], 4);
}

#[test]
fn free_isocurve_is_a_circle() {
    let tmp = tempfile::tempdir().unwrap();
    let out = quasispec(&["isocurve", "--lambda", "10000"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = csv_rows(&tmp.path().join("level1_curve.csv"));
    assert!(!rows.is_empty());
    for r in rows {
        assert!((r["kappa"].parse::<f64>().unwrap() - 10.0).abs() < 1e-12);
    }
    assert_hashes(tmp.path());
}

#[test]
fn isocurve_records_level_differences() {
    let tmp = tempfile::tempdir().unwrap();
    let pot = write_potential(tmp.path(), r#"{"Q": 1, "terms": [{"s1": [1, 0], "s2": [0, 0], "re": 0.05}]}"#);
    let dir = tmp.path().join("o");
    let out = quasispec(&["isocurve", "--potential", &pot, "--levels", "2"], &dir);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let m = manifest(&dir);
    let levels = m["summary"]["levels"].as_array().unwrap();
    assert_eq!(levels.len(), 2);
    assert!(levels[1]["max_abs_h"].as_f64().unwrap() >= 0.0);
    assert!(dir.join("level2_diff.csv").exists());
    assert_hashes(&dir);
}

#[test]
fn thread_count_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |val: &str, dir: &Path| {
        Command::new(env!("CARGO_BIN_EXE_quasispec"))
            .args(["lattice", "--output"])
            .arg(dir)
            .env("QUASISPEC_THREADS", val)
            .output()
            .unwrap()
    };
    let ok = tmp.path().join("a");
    assert_eq!(run("2", &ok).status.code(), Some(0));
    assert_eq!(manifest(&ok)["threads"], 2);
    assert_eq!(run("many", &tmp.path().join("b")).status.code(), Some(2));
}

#[test]
fn spectrum_series_agrees() {
    let tmp = tempfile::tempdir().unwrap();
    let pot = write_potential(tmp.path(), r#"{"Q": 1, "terms": [{"s1": [1, 0], "s2": [0, 0], "re": 0.05}]}"#);
    let dir = tmp.path().join("o");
    let out = quasispec(&["spectrum", "--potential", &pot], &dir);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let s: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("spectrum.json")).unwrap()).unwrap();
    assert_eq!(s["within_tail_bound"], Value::Bool(true));
    assert!(dir.join("eigenvector.csv").exists());
}

#[test]
fn paper_schedule_rejects_large_delta() {
    let tmp = tempfile::tempdir().unwrap();
    let out = quasispec(&["params", "--mode", "paper", "--set", "delta=0.25"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn resonance_membership_is_consistent() {
    let tmp = tempfile::tempdir().unwrap();
    let out = quasispec(&["resonance"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let m = manifest(tmp.path());
    assert_eq!(m["summary"]["monte_carlo"]["membership_mismatches"], 0);
    assert!(m["summary"]["measure"]["measure"].as_f64().unwrap() > 0.0);
}
