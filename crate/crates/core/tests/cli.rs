//! The `nugget` command line: exit codes and stage artifacts.

mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::{fixture, timing_lock};
use nugget::harness::{Pipeline, ToolchainConfig, ValidationReport};
use nugget::marker::read_specs;
use nugget::nugget::RoiAction;

fn nugget(out_dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nugget"))
        .arg("--out-dir")
        .arg(out_dir)
        .args(args)
        .output()
        .expect("spawn nugget")
}

fn ok(out_dir: &Path, args: &[&str]) -> String {
    let out = nugget(out_dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Runs prepare, analyze, select and nugget for `loops`.
fn through_nugget(dir: &Path) {
    let fx = fixture("loops");
    let src = fx.source_paths()[0].display().to_string();
    ok(dir, &["prepare", &src]);
    ok(
        dir,
        &["analyze", "--interval-size", "10000", "--", fx.args[0]],
    );
    ok(dir, &["select", "--seed", "3"]);
    ok(dir, &["nugget"]);
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(nugget(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        nugget(dir.path(), &["select", "--method", "psychic"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(nugget(dir.path(), &["prepare"]).status.code(), Some(2));
}

#[test]
fn pipeline_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = nugget(dir.path(), &["analyze", "--", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
    assert_eq!(nugget(dir.path(), &["report"]).status.code(), Some(1));
    let out = nugget(dir.path(), &["analyze", "--interval-size", "0"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn toolchain_config_is_honored() {
    let dir = tempfile::tempdir().unwrap();
    let mut tc = ToolchainConfig::default();
    tc.source_to_ir[0] = "missing-frontend-9".into();
    let cfg = dir.path().join("toolchain.json");
    std::fs::write(&cfg, serde_json::to_string(&tc).unwrap()).unwrap();
    let src = fixture("loops").source_paths()[0].display().to_string();
    let out = Command::new(env!("CARGO_BIN_EXE_nugget"))
        .arg("--out-dir")
        .arg(dir.path())
        .arg("--toolchain-config")
        .arg(&cfg)
        .args(["prepare", &src])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing-frontend-9"));
}

#[test]
fn stages_write_their_artifacts() {
    let _g = timing_lock();
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    through_nugget(d);
    for f in [
        "base.ll",
        "workload.json",
        "bbid.map",
        "nugget.profile",
        "selection.json",
        "nuggets.json",
    ] {
        assert!(d.join(f).is_file(), "{f} missing");
    }
    let specs = read_specs(&d.join("nuggets.json")).unwrap();
    assert!(!specs.is_empty());
    for s in &specs {
        assert!(d.join(format!("nugget_{}.bin", s.interval_id)).is_file());
    }

    let selection = std::fs::read(d.join("selection.json")).unwrap();
    ok(d, &["select", "--seed", "3"]);
    assert_eq!(std::fs::read(d.join("selection.json")).unwrap(), selection);
    let random = ok(
        d,
        &[
            "select",
            "--method",
            "random",
            "--samples",
            "2",
            "--seed",
            "1",
        ],
    );
    assert_eq!(random.lines().count(), 2);
    assert_eq!(
        ok(
            d,
            &[
                "select",
                "--method",
                "random",
                "--samples",
                "2",
                "--seed",
                "1"
            ]
        ),
        random
    );

    ok(d, &["select", "--seed", "3"]);
    ok(d, &["validate", "--reps", "1"]);
    let report = ValidationReport::read(&d.join("report.json")).unwrap();
    assert!(report.complete);
    assert!(d.join("report.csv").is_file());
    assert!(ok(d, &["report"]).contains("ground truth"));
    let path = d.join("report.json").display().to_string();
    let e: f64 = ok(d, &["speedup", &path, &path]).trim().parse().unwrap();
    assert_eq!(e, 0.0);
}

#[test]
fn missed_marker_fails_validation_with_3() {
    let _g = timing_lock();
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    through_nugget(d);
    let p = Pipeline::new(ToolchainConfig::default(), d);
    let mut spec = read_specs(&d.join("nuggets.json")).unwrap().remove(0);
    spec.end.required_count += 1_000_000_000;
    let (module, table) = p.load_base().unwrap();
    p.build_nugget(&module, &table, &spec, RoiAction::Timer, false)
        .unwrap();
    let out = nugget(d, &["validate", "--reps", "1"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stdout).contains("incomplete"));
    let report = ValidationReport::read(&d.join("report.json")).unwrap();
    assert!(!report.complete && report.prediction_error.is_none());
    let path = d.join("report.json").display().to_string();
    assert_eq!(nugget(d, &["speedup", &path, &path]).status.code(), Some(1));
}
