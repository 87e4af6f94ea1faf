use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn fsrm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fsrm"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn fsrm")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = fsrm(dir, args);
    assert!(
        out.status.success(),
        "fsrm {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// A working directory with a config that trains for a few epochs only.
fn workspace() -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("fast.cfg"), "max_epochs = 4\nn_realizations = 2\n").unwrap();
    (dir, PathBuf::from("fast.cfg"))
}

fn header(path: &Path) -> Vec<String> {
    let text = fs::read_to_string(path).unwrap();
    let line = text.lines().find(|l| !l.starts_with('#')).unwrap();
    line.split(',').map(str::to_string).collect()
}

fn rows(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().filter(|l| !l.starts_with('#')).count() - 1
}

#[test]
fn pipeline_generate_train_match_evaluate_importance() {
    let (dir, cfg) = workspace();
    let d = dir.path();
    let cfg = cfg.to_str().unwrap();
    ok(d, &["--config", cfg, "--seed", "3", "--out", "data.csv", "generate", "--realization", "1"]);
    let cols = header(&d.join("data.csv"));
    assert_eq!(cols.iter().filter(|c| c.starts_with('x')).count(), 60);
    assert_eq!(rows(&d.join("data.csv")), 1000);

    ok(d, &["--config", cfg, "--out", "model.json", "train", "--input", "data.csv"]);
    assert!(d.join("model.json").exists());
    assert_eq!(rows(&d.join("model.history.csv")), 4);

    ok(d, &["--out", "matches.csv", "--metric", "mahalanobis", "match", "--model", "model.json", "--input", "data.csv"]);
    assert_eq!(header(&d.join("matches.csv"))[..3], ["unit_id", "t", "yf"]);
    assert_eq!(rows(&d.join("matches.csv")), 1000);

    ok(d, &["--out", "metrics.csv", "evaluate", "--matches", "matches.csv", "--input", "data.csv"]);
    let metrics = fs::read_to_string(d.join("metrics.csv")).unwrap();
    let values: Vec<f64> = metrics.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(values[0], 1000.0);
    assert!((values[4] * values[4] - values[3]).abs() < 1e-12);

    ok(d, &["--out", "importance.csv", "importance", "--model", "model.json"]);
    assert_eq!(rows(&d.join("importance.csv")), 60);
}

#[test]
fn augment_appends_columns() {
    let (dir, cfg) = workspace();
    let d = dir.path();
    ok(d, &["--config", cfg.to_str().unwrap(), "--out", "data.csv", "generate"]);
    ok(d, &["--seed", "5", "--out", "wide.csv", "augment", "--input", "data.csv", "--k", "7"]);
    assert_eq!(header(&d.join("wide.csv")).len(), header(&d.join("data.csv")).len() + 7);
}

#[test]
fn experiment_is_deterministic() {
    let (dir, cfg) = workspace();
    let d = dir.path();
    let cfg = cfg.to_str().unwrap();
    let a = ok(d, &["--config", cfg, "--seed", "11", "--out", "a", "experiment"]);
    let b = ok(d, &["--config", cfg, "--seed", "11", "--out", "b", "--workers", "2", "experiment"]);
    assert_eq!(a, b);
    assert!(a.starts_with("euclid: sqrt_pehe"));
    for f in ["summary.csv", "realizations.csv"] {
        assert_eq!(fs::read(d.join("a").join(f)).unwrap(), fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn sweep_and_search_write_their_tables() {
    let (dir, cfg) = workspace();
    let d = dir.path();
    let cfg = cfg.to_str().unwrap();
    let out = ok(d, &["--config", cfg, "--realizations", "1", "--out", "sweep", "sweep-bias", "--q", "0,1"]);
    assert_eq!(out.lines().count(), 2);
    assert_eq!(rows(&d.join("sweep/bias_sweep.csv")), 2);
    assert!(d.join("sweep/q_1/summary.csv").exists());

    ok(d, &["--config", cfg, "--out", "search", "search", "--budget", "2"]);
    assert_eq!(rows(&d.join("search/search_ranking.csv")), 2);
}

#[test]
fn errors_exit_nonzero_with_one_line() {
    let (dir, _) = workspace();
    let d = dir.path();
    for args in [
        &["--out", "x.csv", "evaluate", "--matches", "missing.csv", "--input", "missing.csv"][..],
        &["generate"][..],
        &["--config", "missing.cfg", "experiment"][..],
    ] {
        let out = fsrm(d, args);
        assert!(!out.status.success(), "{args:?}");
        let err = String::from_utf8(out.stderr).unwrap();
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(err.starts_with("error: "), "{err}");
    }
    fs::write(d.join("bad.cfg"), "max_epochs = 4\nbogus = 1\n").unwrap();
    let out = fsrm(d, &["--config", "bad.cfg", "experiment"]);
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().contains("line 2"));
}
