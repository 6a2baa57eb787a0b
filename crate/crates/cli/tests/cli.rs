use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn etalab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_etalab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let p = dir.path().join(name);
    fs::write(&p, text).unwrap();
    p
}

fn run_mode(mode: &str, text: &str) -> (TempDir, PathBuf, Output) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(&dir, "c.json", text);
    let out = dir.path().join("out");
    let o = etalab(&[mode, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    (dir, out, o)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn solve_interval_drift() {
    let (_d, out, o) = run_mode(
        "solve",
        r#"{"domain": {"kind": "interval", "a": 0, "b": 1, "n": 1024}, "eta": "4*x", "k": 2}"#,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let r = rows(&out.join("spectrum.csv"));
    assert_eq!(r[0][0], "1");
    let l1: f64 = r[0][1].parse().unwrap();
    assert!((l1 - 13.8696).abs() < 1e-3, "{l1}");
    assert!(out.join("provenance.txt").exists());
}

#[test]
fn hadamard_metric_zero_direction() {
    let (_d, out, o) = run_mode(
        "hadamard-metric",
        r#"{"domain": {"kind": "square", "side": 1, "n": 8}, "H": [["0", "0"], ["0"]], "cluster": 1}"#,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let r = rows(&out.join("qmatrix.csv"));
    assert!(!r.is_empty());
    assert!(r.iter().all(|row| row[2].parse::<f64>().unwrap() == 0.0));
    assert!(out.join("branches.csv").exists() && out.join("fd_report.csv").exists());
}

#[test]
fn csv_numbers_have_17_digits() {
    let (_d, out, o) = run_mode(
        "solve",
        r#"{"domain": {"kind": "square", "side": 1, "n": 6}, "k": 2}"#,
    );
    assert!(o.status.success());
    let r = rows(&out.join("spectrum.csv"));
    let mantissa = r[0][1].split('e').next().unwrap().replace(['.', '-'], "");
    assert_eq!(mantissa.len(), 17, "{}", r[0][1]);
}

#[test]
fn malformed_json_reports_position() {
    let (_d, _out, o) = run_mode("solve", "{\n  \"k\": 3,\n  oops\n}");
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr(&o);
    assert!(msg.contains("line 3") && msg.contains("column"), "{msg}");
}

#[test]
fn schema_errors_name_the_field() {
    let (_d, _out, o) = run_mode(
        "solve",
        r#"{"domain": {"kind": "square", "side": 1, "n": "many"}, "k": 3}"#,
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("domain"), "{}", stderr(&o));

    let (_d, _out, o) = run_mode("solve", r#"{"domain": {"kind": "square", "side": 1, "n": 6}}"#);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`k`"), "{}", stderr(&o));

    let (_d, _out, o) = run_mode(
        "solve",
        r#"{"domain": {"kind": "square", "side": 1, "n": 6}, "k": 2, "V": ["x", "y"]}"#,
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`V`"), "{}", stderr(&o));
}

#[test]
fn missing_config_file_is_a_config_error() {
    let o = etalab(&["solve", "--config", "/nonexistent/c.json", "--out", "/tmp/unused"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn version_is_one_line() {
    let o = etalab(&["--version"]);
    assert!(o.status.success());
    let s = String::from_utf8(o.stdout).unwrap();
    assert_eq!(s.lines().count(), 1);
    assert!(s.starts_with("etalab "));
}

#[test]
fn provenance_lists_defaults() {
    let o = etalab(&["--provenance"]);
    assert!(o.status.success());
    let s = String::from_utf8(o.stdout).unwrap();
    assert!(s.contains("build:") && s.contains("rel_gap"));
}

#[test]
fn help_lists_all_modes() {
    let o = etalab(&["--help"]);
    assert!(o.status.success());
    let s = String::from_utf8(o.stdout).unwrap();
    for m in ["solve", "hadamard-metric", "hadamard-boundary", "sweep", "split-demo", "verify"] {
        assert!(s.contains(m), "{m} missing from help");
    }
}

#[test]
fn unknown_flag_suggests() {
    let o = etalab(&["solve", "--confg", "x.json", "--out", "o"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--config"), "{}", stderr(&o));
}

#[test]
fn runtime_failure_exits_1() {
    let (_d, _out, o) = run_mode(
        "solve",
        r#"{"domain": {"kind": "square", "side": 1, "n": 2}, "k": 5}"#,
    );
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn boundary_mode_artifacts() {
    let (_d, out, o) = run_mode(
        "hadamard-boundary",
        r#"{"domain": {"kind": "disk", "radius": 1, "n": 24}, "V": ["x", "y"], "cluster": 1, "t": [1e-3]}"#,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let b = rows(&out.join("branches.csv"));
    let lam: f64 = b[0][1].parse().unwrap();
    let slope: f64 = b[0][2].parse().unwrap();
    assert!((slope / (-2.0 * lam) - 1.0).abs() < 0.05, "{slope} vs {lam}");
    let fd = rows(&out.join("fd_report.csv"));
    assert_eq!(fd.len(), 1);
}

#[test]
fn sweep_writes_csv_and_svg() {
    let (_d, out, o) = run_mode(
        "sweep",
        r#"{"domain": {"kind": "square", "side": 1, "n": 8}, "H": [["x", "0"], ["-x"]], "k": 3,
            "sweep": {"t_min": -0.1, "t_max": 0.1, "steps": 5}}"#,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let r = rows(&out.join("lambda_of_t.csv"));
    assert_eq!(r.len(), 5);
    assert_eq!(r[0].len(), 4);
    let svg = fs::read_to_string(out.join("lambda_of_t.svg")).unwrap();
    let doc = roxmltree::Document::parse(&svg).expect("well-formed SVG");
    let lines = doc.descendants().filter(|n| n.has_tag_name("polyline")).count();
    assert_eq!(lines, 3);
}

#[test]
fn split_demo_and_verify() {
    let (_d, out, o) = run_mode(
        "split-demo",
        r#"{"domain": {"kind": "square", "side": 1, "n": 10}, "cluster": 2, "seeds": [1, 2, 3]}"#,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let r = rows(&out.join("split_report.csv"));
    // 3 metric, 3 boundary, 1 symmetric control
    assert_eq!(r.len(), 7);
    assert_eq!(r.iter().filter(|row| row[6] == "1").count(), 6);

    let (_d, out, o) = run_mode("verify", r#"{"lemma": {"tuples": 5, "points": 10}}"#);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = rows(&out.join("lemma_residuals.csv"));
    assert_eq!(r.len(), 5 * 3);
}

#[test]
fn every_csv_starts_with_its_header() {
    let (_d, out, o) = run_mode(
        "hadamard-metric",
        r#"{"domain": {"kind": "square", "side": 1, "n": 8}, "H": [["x", "y"], ["1"]], "cluster": 2}"#,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    for name in ["qmatrix.csv", "branches.csv", "fd_report.csv"] {
        let text = fs::read_to_string(out.join(name)).unwrap();
        let mut lines = text.lines();
        let header = lines.next().unwrap();
        assert!(header.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == ','), "{header}");
        let width = header.split(',').count();
        assert!(lines.all(|l| l.split(',').count() == width), "{name}");
    }
}
