//! Acceptance criteria, one pass/fail line each.
//!
//! `FSRM_ACCEPTANCE_REALIZATIONS` overrides the number of realizations per
//! experiment (default 100).

use std::process::ExitCode;
use std::time::Instant;

use fsrm_core::balance::{euclidean_cost, sinkhorn_wasserstein};
use fsrm_core::datagen::Dataset;
use fsrm_core::eval::{estimate_from_counterfactuals, metrics};
use fsrm_core::harness::{run_experiment, ExperimentConfig, ExperimentResult};
use fsrm_core::matching::{optimal_assignment, DistanceMetric};
use fsrm_core::numcore::{Matrix, RandomStream};
use fsrm_validation::{brute_force_assignment, exact_uniform_ot, gradient_check, random_matrix};

const C: usize = 0;
const I: usize = 3;

struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, id: &str, pass: bool, detail: String) {
        if !pass {
            self.failed += 1;
        }
        println!(
            "{} criterion {id}: {detail}",
            if pass { "PASS" } else { "FAIL" }
        );
    }
}

fn realizations() -> usize {
    std::env::var("FSRM_ACCEPTANCE_REALIZATIONS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(100)
}

fn experiment(label: &str, cfg: &ExperimentConfig) -> Option<ExperimentResult> {
    let start = Instant::now();
    match run_experiment(cfg) {
        Ok(r) => {
            eprintln!("[{label}] {} rows in {:.0?}", r.rows.len(), start.elapsed());
            Some(r)
        }
        Err(e) => {
            eprintln!("[{label}] failed: {e}");
            None
        }
    }
}

fn sqrt_pehe(r: &Option<ExperimentResult>, metric: DistanceMetric) -> f64 {
    r.as_ref()
        .and_then(|r| r.summary_for(metric))
        .map_or(f64::NAN, |s| s.mean_sqrt_pehe)
}

/// Realizations in which the irrelevant block's mean importance is below
/// half the confounder block's, out of those reporting both.
fn importance_wins(r: &Option<ExperimentResult>) -> (usize, usize) {
    let Some(r) = r else { return (0, 0) };
    let rows: Vec<_> = r
        .rows_for(DistanceMetric::Euclidean)
        .filter_map(|row| Some((row.importance[C]?, row.importance[I]?)))
        .collect();
    (
        rows.iter().filter(|(c, i)| *i < 0.5 * c).count(),
        rows.len(),
    )
}

fn metric_fixtures() -> (bool, String) {
    let x = Matrix::zeros(4, 1);
    let t = vec![true, false, true, false];
    let y = vec![3.0, 1.0, 4.0, 2.0];
    let cf = [1.5, 2.5, 3.0, 0.5];
    let ite_hat = [1.5, 1.5, 1.0, -1.5];

    let mut by_mu = Dataset::new(x.clone(), t.clone(), y.clone()).unwrap();
    by_mu.mu0 = Some(vec![0.0; 4]);
    by_mu.mu1 = Some(vec![1.0, 1.0, 2.0, -1.0]);
    let mut by_ycf = Dataset::new(x, t, y).unwrap();
    by_ycf.y_cf = Some(vec![2.0, 2.0, 2.0, 1.0]);

    let mut worst = 0.0f64;
    for ds in [&by_mu, &by_ycf] {
        let est = estimate_from_counterfactuals(ds, &cf).unwrap();
        let m = metrics(&est).unwrap();
        for (a, b) in est.ite_hat.iter().zip(ite_hat) {
            worst = worst.max((a - b).abs());
        }
        worst = worst
            .max((est.ate_hat - 0.625).abs())
            .max((est.ate_true.unwrap() - 0.75).abs())
            .max((m.eps_ate - 0.125).abs())
            .max((m.pehe - 0.4375).abs())
            .max((m.sqrt_pehe * m.sqrt_pehe - m.pehe).abs());
    }
    (
        worst <= 1e-12,
        format!("largest deviation {worst:e} (tolerance 1e-12)"),
    )
}

fn determinism() -> (bool, String) {
    let cfg = ExperimentConfig {
        n_realizations: 2,
        metrics: DistanceMetric::ALL.to_vec(),
        ..ExperimentConfig::default()
    };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut files = Vec::new();
    for dir in &dirs {
        let cfg = ExperimentConfig {
            out_dir: Some(dir.path().to_path_buf()),
            ..cfg.clone()
        };
        if let Err(e) = run_experiment(&cfg) {
            return (false, format!("experiment failed: {e}"));
        }
        let read = |name: &str| std::fs::read(dir.path().join(name)).unwrap_or_default();
        files.push((read("summary.csv"), read("realizations.csv")));
    }
    let same = files[0] == files[1] && !files[0].0.is_empty();
    (
        same,
        format!("summary.csv and realizations.csv identical across two runs: {same}"),
    )
}

fn main() -> ExitCode {
    let n = realizations();
    let mut report = Report { failed: 0 };
    let base = ExperimentConfig {
        n_realizations: n,
        ..ExperimentConfig::default()
    };
    println!("{n} realizations per experiment");

    // seconds-scale oracles first
    let worst =
        (0..60u64)
            .map(gradient_check)
            .fold((0.0f64, 0usize, 0usize, String::new()), |acc, g| {
                let (err, worst) = if g.max_rel_err > acc.0 {
                    (g.max_rel_err, g.worst)
                } else {
                    (acc.0, acc.3)
                };
                (err, acc.1 + g.checked, acc.2 + g.skipped_kinks, worst)
            });
    report.line(
        "8",
        worst.0 < 1e-4,
        format!(
            "60 configurations, {} coordinates, max relative error {:.2e} (< 1e-4), {} kink coordinates skipped; worst {}",
            worst.1, worst.0, worst.2, worst.3
        ),
    );

    let mut s = RandomStream::new(9);
    let mut exact = 0;
    for _ in 0..200 {
        let small = 1 + s.below(7);
        let large = small + s.below(3);
        let (r, c) = if s.bernoulli(0.5) {
            (small, large)
        } else {
            (large, small)
        };
        let cost =
            Matrix::from_vec(r, c, (0..r * c).map(|_| s.below(50) as f64).collect()).unwrap();
        if optimal_assignment(&cost).ok().map(|a| a.total) == Some(brute_force_assignment(&cost)) {
            exact += 1;
        }
    }
    report.line(
        "9",
        exact == 200,
        format!("{exact}/200 assignment totals equal enumeration"),
    );

    let mut s = RandomStream::new(10);
    let (mut within, mut worst_rel) = (0, 0.0f64);
    for _ in 0..50 {
        let (n, m, d) = (1 + s.below(5), 1 + s.below(5), 1 + s.below(3));
        let a = random_matrix(n, d, &mut s);
        let b = random_matrix(m, d, &mut s);
        let truth = exact_uniform_ot(&euclidean_cost(&a, &b));
        let rel = sinkhorn_wasserstein(&a, &b, 1e-3, 2000)
            .map_or(f64::INFINITY, |tp| (tp.cost - truth).abs() / truth);
        worst_rel = worst_rel.max(rel);
        within += usize::from(rel <= 0.05);
    }
    report.line(
        "10",
        within == 50,
        format!(
            "{within}/50 Sinkhorn costs within 5% of exact transport (worst {:.1}%)",
            100.0 * worst_rel
        ),
    );

    let (ok, detail) = metric_fixtures();
    report.line("11", ok, detail);

    let (ok, detail) = determinism();
    report.line("12", ok, detail);

    // experiments sharing seeds
    let full = experiment(
        "q0 full",
        &ExperimentConfig {
            metrics: DistanceMetric::ALL.to_vec(),
            ..base.clone()
        },
    );
    let no_fsl = experiment(
        "q0 no-fsl",
        &ExperimentConfig {
            disable_fsl: true,
            ..base.clone()
        },
    );
    let no_ipm = experiment(
        "q0 no-ipm",
        &ExperimentConfig {
            disable_ipm: true,
            ..base.clone()
        },
    );
    let biased = experiment(
        "q1 full",
        &ExperimentConfig {
            q: 1.0,
            ..base.clone()
        },
    );
    let biased_no_ipm = experiment(
        "q1 no-ipm",
        &ExperimentConfig {
            q: 1.0,
            disable_ipm: true,
            ..base.clone()
        },
    );
    let augmented = experiment(
        "q0 augmented",
        &ExperimentConfig {
            augment_irrelevant: 35,
            ..base.clone()
        },
    );

    let euclid = sqrt_pehe(&full, DistanceMetric::Euclidean);
    let eps_ate = full
        .as_ref()
        .and_then(|r| r.summary_for(DistanceMetric::Euclidean))
        .map_or(f64::NAN, |s| s.mean_eps_ate);
    report.line(
        "1",
        euclid <= 0.20 && eps_ate <= 0.03,
        format!(
            "Euclidean mean sqrt_pehe {euclid:.4} (<= 0.20), mean eps_ate {eps_ate:.4} (<= 0.03)"
        ),
    );

    let mahal = sqrt_pehe(&full, DistanceMetric::Mahalanobis);
    let prop = sqrt_pehe(&full, DistanceMetric::Propensity);
    report.line(
        "2",
        euclid <= mahal && mahal <= prop,
        format!("mean sqrt_pehe Euclidean {euclid:.4} <= Mahalanobis {mahal:.4} <= propensity {prop:.4}"),
    );

    let ablated = sqrt_pehe(&no_fsl, DistanceMetric::Euclidean);
    report.line(
        "3",
        ablated >= 2.0 * euclid,
        format!(
            "without feature selection {ablated:.4} vs full {euclid:.4}, ratio {:.3} (>= 2)",
            ablated / euclid
        ),
    );

    let d0 = sqrt_pehe(&no_ipm, DistanceMetric::Euclidean) - euclid;
    let q1 = sqrt_pehe(&biased, DistanceMetric::Euclidean);
    let d1 = sqrt_pehe(&biased_no_ipm, DistanceMetric::Euclidean) - q1;
    report.line(
        "4",
        d0.abs() < 0.05 && d1 >= 0.15,
        format!("dropping the balancing penalty changes sqrt_pehe by {d0:+.4} at q=0 (|.| < 0.05) and {d1:+.4} at q=1 (>= 0.15)"),
    );

    report.line(
        "5",
        q1 <= 2.5 * euclid,
        format!(
            "sqrt_pehe at q=1 {q1:.4} vs q=0 {euclid:.4}, ratio {:.3} (<= 2.5)",
            q1 / euclid
        ),
    );

    let (wins, total) = importance_wins(&full);
    let need = (0.9 * n as f64).ceil() as usize;
    report.line(
        "6",
        wins >= need && total == n,
        format!("irrelevant importance below half the confounder importance in {wins}/{total} realizations (>= {need})"),
    );

    let (aug_wins, aug_total) = importance_wins(&augmented);
    let shift = sqrt_pehe(&augmented, DistanceMetric::Euclidean) - euclid;
    report.line(
        "7",
        aug_wins >= need && aug_total == n && shift.abs() < 0.05,
        format!(
            "after adding 35 noise columns: importance check {aug_wins}/{aug_total} (>= {need}), sqrt_pehe shift {shift:+.4} (|.| < 0.05)"
        ),
    );

    println!("{} criteria failed", report.failed);
    if report.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
