//! Experiment orchestration: replicated runs over seeds, bias sweeps,
//! ablations and hyperparameter search, with CSV output.

mod config;
mod reports;
mod search;

use std::fs;
use std::path::Path;

use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;

use crate::datagen::{
    augment_irrelevant, biased_resample, generate_pool, read_dataset, BlockLabel, Dataset,
    SyntheticSpec,
};
use crate::error::{FsrmError, Result};
use crate::eval::{estimate_effects, feature_importance, mean_importance, metrics, MetricReport};
use crate::matching::{impute_counterfactuals, DistanceMetric, MatchResult};
use crate::network::{train, TrainConfig, TrainOutcome, TrainedModel};
use crate::numcore::RandomStream;

pub use config::{DataSource, ExperimentConfig};
pub use reports::{
    read_match_counterfactuals, write_history_csv, write_importance_csv, write_match_report,
    write_metrics_csv,
};
pub use search::{hyper_search, random_grid, SearchCandidate, SearchResult};

/// Blocks whose mean feature importance is reported.
pub const IMPORTANCE_BLOCKS: [BlockLabel; 4] = [
    BlockLabel::Confounder,
    BlockLabel::Adjustment,
    BlockLabel::Instrument,
    BlockLabel::Irrelevant,
];

/// One metric's outcome for one realization.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RealizationRow {
    pub realization: usize,
    pub metric: DistanceMetric,
    pub report: MetricReport,
    pub best_epoch: Option<usize>,
    /// Mean normalized importance per entry of [`IMPORTANCE_BLOCKS`].
    pub importance: [Option<f64>; 4],
}

/// Mean and sample standard deviation across realizations for one metric.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub metric: DistanceMetric,
    pub n_ok: usize,
    pub n_failed: usize,
    pub mean_eps_ate: f64,
    pub std_eps_ate: f64,
    pub mean_pehe: f64,
    pub std_pehe: f64,
    pub mean_sqrt_pehe: f64,
    pub std_sqrt_pehe: f64,
    pub mean_importance: [Option<f64>; 4],
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub rows: Vec<RealizationRow>,
    pub summary: Vec<SummaryRow>,
    /// `(realization, diagnostic)` for each failed realization.
    pub failures: Vec<(usize, String)>,
}

impl ExperimentResult {
    pub fn summary_for(&self, metric: DistanceMetric) -> Option<&SummaryRow> {
        self.summary.iter().find(|s| s.metric == metric)
    }

    pub fn rows_for(&self, metric: DistanceMetric) -> impl Iterator<Item = &RealizationRow> {
        self.rows.iter().filter(move |r| r.metric == metric)
    }
}

/// Data shared by every realization of an experiment.
pub(crate) enum Source {
    Pool(Dataset),
    Csv,
}

pub(crate) fn prepare_source(cfg: &ExperimentConfig, master: &RandomStream) -> Result<Source> {
    match &cfg.data {
        DataSource::Csv(_) => Ok(Source::Csv),
        DataSource::Synthetic {
            n_confounders,
            n_adjustment,
            n_instruments,
            n_irrelevant,
            noise_std,
            pool_treated,
            pool_control,
        } => {
            let mut stream = master.split(0);
            let mut spec = SyntheticSpec::with_sizes(
                *n_confounders,
                *n_adjustment,
                *n_instruments,
                *n_irrelevant,
                &mut stream,
            );
            spec.noise_std = *noise_std;
            spec.pool_treated = *pool_treated;
            spec.pool_control = *pool_control;
            spec.draw_treated = cfg.draw_treated;
            spec.draw_control = cfg.draw_control;
            Ok(Source::Pool(generate_pool(&spec, &mut stream)?))
        }
    }
}

/// Dataset of realization `i`: a resample of the synthetic pool, or the CSV
/// for that index, optionally resampled with bias and augmented with noise.
pub(crate) fn realization_data(
    cfg: &ExperimentConfig,
    source: &Source,
    stream: &RandomStream,
    i: usize,
) -> Result<Dataset> {
    let ds = match source {
        Source::Pool(pool) => biased_resample(
            pool,
            cfg.q,
            cfg.draw_treated,
            cfg.draw_control,
            &mut stream.split(1),
        )?,
        Source::Csv => {
            let path = cfg.data.csv_path(i).expect("csv source");
            let ds = read_dataset(&path)?;
            if cfg.q > 0.0 {
                biased_resample(
                    &ds,
                    cfg.q,
                    cfg.draw_treated,
                    cfg.draw_control,
                    &mut stream.split(1),
                )?
            } else {
                ds
            }
        }
    };
    if cfg.augment_irrelevant > 0 {
        augment_irrelevant(&ds, cfg.augment_irrelevant, &mut stream.split(2))
    } else {
        Ok(ds)
    }
}

/// Dataset of realization `i` exactly as [`run_experiment`] would see it.
pub fn realization_dataset(cfg: &ExperimentConfig, i: usize) -> Result<Dataset> {
    cfg.validate()?;
    let master = RandomStream::new(cfg.seed);
    let source = prepare_source(cfg, &master)?;
    realization_data(cfg, &source, &master.split(i as u64 + 1), i)
}

/// Matches every unit on the learned representation and scores the result.
pub fn evaluate_model(
    model: &TrainedModel,
    ds: &Dataset,
    metric: DistanceMetric,
) -> Result<(MatchResult, MetricReport)> {
    let fr = model.predict(&ds.x, &ds.t)?;
    let mr = impute_counterfactuals(ds, &fr.representation, metric, Some(&fr.p_treated))?;
    let report = metrics(&estimate_effects(ds, &mr)?)?;
    Ok((mr, report))
}

fn block_importance(model: &TrainedModel, ds: &Dataset) -> [Option<f64>; 4] {
    let (Ok(imp), Some(labels)) = (feature_importance(&model.params), &ds.block_labels) else {
        return [None; 4];
    };
    IMPORTANCE_BLOCKS.map(|b| mean_importance(&imp, labels, b))
}

fn run_realization(
    cfg: &ExperimentConfig,
    train_cfg: &TrainConfig,
    source: &Source,
    master: &RandomStream,
    i: usize,
) -> Result<Vec<RealizationRow>> {
    let stream = master.split(i as u64 + 1);
    let ds = realization_data(cfg, source, &stream, i)?;
    let TrainOutcome {
        model, best_epoch, ..
    } = train(train_cfg, &ds, &mut stream.split(3))?;
    let importance = block_importance(&model, &ds);
    cfg.metrics
        .iter()
        .map(|&metric| {
            let (_, report) = evaluate_model(&model, &ds, metric)?;
            Ok(RealizationRow {
                realization: i,
                metric,
                report,
                best_epoch,
                importance,
            })
        })
        .collect()
}

pub(crate) fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| FsrmError::Config(format!("cannot start worker pool: {e}")))
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Aggregates per-realization rows into one summary row per metric.
pub fn summarize(
    rows: &[RealizationRow],
    metrics: &[DistanceMetric],
    n_failed: usize,
) -> Vec<SummaryRow> {
    metrics
        .iter()
        .map(|&metric| {
            let sel: Vec<&RealizationRow> = rows.iter().filter(|r| r.metric == metric).collect();
            let col = |f: fn(&MetricReport) -> f64| {
                mean_std(&sel.iter().map(|r| f(&r.report)).collect::<Vec<_>>())
            };
            let (mean_eps_ate, std_eps_ate) = col(|m| m.eps_ate);
            let (mean_pehe, std_pehe) = col(|m| m.pehe);
            let (mean_sqrt_pehe, std_sqrt_pehe) = col(|m| m.sqrt_pehe);
            let mean_importance = std::array::from_fn(|b| {
                let vals: Vec<f64> = sel.iter().filter_map(|r| r.importance[b]).collect();
                (!vals.is_empty()).then(|| mean_std(&vals).0)
            });
            SummaryRow {
                metric,
                n_ok: sel.len(),
                n_failed,
                mean_eps_ate,
                std_eps_ate,
                mean_pehe,
                std_pehe,
                mean_sqrt_pehe,
                std_sqrt_pehe,
                mean_importance,
            }
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn importance_header() -> Vec<String> {
    IMPORTANCE_BLOCKS
        .iter()
        .map(|b| format!("importance_{}", b.as_str()))
        .collect()
}

pub fn write_realizations_csv(rows: &[RealizationRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = [
        "realization",
        "metric",
        "eps_ate",
        "pehe",
        "sqrt_pehe",
        "n_units",
        "best_epoch",
    ]
    .map(String::from)
    .to_vec();
    header.extend(importance_header());
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.realization.to_string(),
            r.metric.as_str().to_string(),
            r.report.eps_ate.to_string(),
            r.report.pehe.to_string(),
            r.report.sqrt_pehe.to_string(),
            r.report.n_units.to_string(),
            r.best_epoch
                .map_or_else(|| "init".to_string(), |e| e.to_string()),
        ];
        rec.extend(r.importance.iter().map(|v| opt(*v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary_csv(summary: &[SummaryRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = [
        "metric",
        "n_ok",
        "n_failed",
        "mean_eps_ate",
        "std_eps_ate",
        "mean_pehe",
        "std_pehe",
        "mean_sqrt_pehe",
        "std_sqrt_pehe",
    ]
    .map(String::from)
    .to_vec();
    header.extend(importance_header());
    w.write_record(&header)?;
    for s in summary {
        let mut rec = vec![
            s.metric.as_str().to_string(),
            s.n_ok.to_string(),
            s.n_failed.to_string(),
            s.mean_eps_ate.to_string(),
            s.std_eps_ate.to_string(),
            s.mean_pehe.to_string(),
            s.std_pehe.to_string(),
            s.mean_sqrt_pehe.to_string(),
            s.std_sqrt_pehe.to_string(),
        ];
        rec.extend(s.mean_importance.iter().map(|v| opt(*v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs `n_realizations` independent generate, train, match and score
/// pipelines and aggregates their metrics.
///
/// Realization `i` draws everything from a stream split off the master seed
/// at `i`, so results do not depend on the realization count or worker
/// count. With an output directory, each realization writes its own file
/// under `realizations/`, and the merged `realizations.csv` and
/// `summary.csv` are written at the end.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let train_cfg = cfg.effective_train_config();
    let master = RandomStream::new(cfg.seed);
    let source = prepare_source(cfg, &master)?;
    if let Some(dir) = &cfg.out_dir {
        fs::create_dir_all(dir.join("realizations"))?;
        fs::write(dir.join("config.txt"), cfg.to_text())?;
    }

    let outcomes: Vec<Result<Vec<RealizationRow>>> = pool(cfg.workers)?.install(|| {
        (0..cfg.n_realizations)
            .into_par_iter()
            .map(|i| {
                let rows = run_realization(cfg, &train_cfg, &source, &master, i)?;
                if let Some(dir) = &cfg.out_dir {
                    write_realizations_csv(
                        &rows,
                        dir.join("realizations")
                            .join(format!("realization_{i:04}.csv")),
                    )?;
                }
                info!("realization {i} done");
                Ok(rows)
            })
            .collect()
    });

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (i, out) in outcomes.into_iter().enumerate() {
        match out {
            Ok(r) => rows.extend(r),
            Err(e) => {
                warn!("realization {i} failed: {e}");
                failures.push((i, e.to_string()));
            }
        }
    }
    if failures.len() * 10 > cfg.n_realizations {
        return Err(FsrmError::Numerical(format!(
            "{} of {} realizations failed; first: realization {}: {}",
            failures.len(),
            cfg.n_realizations,
            failures[0].0,
            failures[0].1
        )));
    }
    let summary = summarize(&rows, &cfg.metrics, failures.len());
    if let Some(dir) = &cfg.out_dir {
        write_realizations_csv(&rows, dir.join("realizations.csv"))?;
        write_summary_csv(&summary, dir.join("summary.csv"))?;
    }
    Ok(ExperimentResult {
        rows,
        summary,
        failures,
    })
}

/// One row of a bias sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub q: f64,
    pub summary: SummaryRow,
}

/// Runs one experiment per `q`, writing each under `q_<index>/` and the
/// combined table to `bias_sweep.csv` when an output directory is set.
pub fn bias_sweep(cfg: &ExperimentConfig, q_grid: &[f64]) -> Result<Vec<SweepRow>> {
    if q_grid.is_empty() {
        return Err(FsrmError::invalid("empty q grid"));
    }
    let mut out = Vec::new();
    for (k, &q) in q_grid.iter().enumerate() {
        let run_cfg = ExperimentConfig {
            q,
            out_dir: cfg.out_dir.as_ref().map(|d| d.join(format!("q_{k}"))),
            ..cfg.clone()
        };
        let res = run_experiment(&run_cfg)?;
        out.extend(
            res.summary
                .into_iter()
                .map(|summary| SweepRow { q, summary }),
        );
    }
    if let Some(dir) = &cfg.out_dir {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("bias_sweep.csv"))?;
        w.write_record([
            "q",
            "metric",
            "mean_sqrt_pehe",
            "std_sqrt_pehe",
            "mean_eps_ate",
            "std_eps_ate",
        ])?;
        for r in &out {
            w.write_record([
                r.q.to_string(),
                r.summary.metric.as_str().to_string(),
                r.summary.mean_sqrt_pehe.to_string(),
                r.summary.std_sqrt_pehe.to_string(),
                r.summary.mean_eps_ate.to_string(),
                r.summary.std_eps_ate.to_string(),
            ])?;
        }
        w.flush()?;
    }
    Ok(out)
}
