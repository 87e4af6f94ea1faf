use std::collections::BTreeMap;
use std::path::Path;

use fsrm_core::harness::{run_experiment, ExperimentConfig};
use fsrm_core::matching::DistanceMetric;
use fsrm_core::network::TrainConfig;

fn small_config(out: &Path) -> ExperimentConfig {
    ExperimentConfig {
        train: TrainConfig {
            max_epochs: 5,
            ..TrainConfig::default()
        },
        n_realizations: 3,
        metrics: DistanceMetric::ALL.to_vec(),
        out_dir: Some(out.to_path_buf()),
        ..ExperimentConfig::default()
    }
}

fn records(path: &Path) -> Vec<BTreeMap<String, String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let headers = r.headers().unwrap().clone();
    r.records()
        .map(|rec| {
            headers
                .iter()
                .zip(rec.unwrap().iter())
                .map(|(h, v)| (h.to_string(), v.to_string()))
                .collect()
        })
        .collect()
}

#[test]
fn summary_recomputes_from_realization_rows() {
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&small_config(dir.path())).unwrap();
    let rows = records(&dir.path().join("realizations.csv"));
    let summary = records(&dir.path().join("summary.csv"));
    assert_eq!(rows.len(), 9);
    assert_eq!(summary.len(), 3);
    for s in &summary {
        let sel: Vec<_> = rows.iter().filter(|r| r["metric"] == s["metric"]).collect();
        assert_eq!(s["n_ok"], sel.len().to_string());
        for col in ["eps_ate", "pehe", "sqrt_pehe"] {
            let v: Vec<f64> = sel.iter().map(|r| r[col].parse().unwrap()).collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
            let got_mean: f64 = s[&format!("mean_{col}")].parse().unwrap();
            let got_std: f64 = s[&format!("std_{col}")].parse().unwrap();
            assert!((got_mean - mean).abs() < 1e-12, "{col}");
            assert!((got_std - var.sqrt()).abs() < 1e-12, "{col}");
        }
    }
    for i in 0..3 {
        assert!(dir
            .path()
            .join(format!("realizations/realization_{i:04}.csv"))
            .exists());
    }
}

#[test]
fn realization_results_do_not_depend_on_worker_count_or_total() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_experiment(&small_config(a.path())).unwrap();
    run_experiment(&ExperimentConfig {
        n_realizations: 2,
        workers: 2,
        ..small_config(b.path())
    })
    .unwrap();
    for i in 0..2 {
        let name = format!("realizations/realization_{i:04}.csv");
        assert_eq!(
            std::fs::read(a.path().join(&name)).unwrap(),
            std::fs::read(b.path().join(&name)).unwrap()
        );
    }
}
