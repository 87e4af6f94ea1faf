use std::path::Path;

use crate::datagen::Dataset;
use crate::error::{FsrmError, Result};
use crate::eval::MetricReport;
use crate::matching::MatchResult;
use crate::network::{EpochRecord, NetworkParams};

pub fn write_history_csv(history: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "epoch",
        "train_total",
        "train_treatment",
        "train_outcome_mse",
        "train_ipm",
        "val_total",
        "val_treatment",
        "val_outcome_mse",
        "val_ipm",
        "best_val_total",
    ])?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            r.train.total.to_string(),
            r.train.treatment.to_string(),
            r.train.outcome_mse.to_string(),
            r.train.ipm.to_string(),
            r.val.total.to_string(),
            r.val.treatment.to_string(),
            r.val.outcome_mse.to_string(),
            r.val.ipm.to_string(),
            r.best_val_total.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One line per unit: its factual data, imputed counterfactual, donor and
/// optimal-assignment partner (empty when unpaired).
pub fn write_match_report(ds: &Dataset, mr: &MatchResult, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "unit_id",
        "t",
        "yf",
        "cf_outcome",
        "cf_source",
        "paired",
        "pair_partner",
        "distance",
    ])?;
    for i in 0..ds.n() {
        w.write_record([
            i.to_string(),
            u8::from(ds.t[i]).to_string(),
            ds.y_f[i].to_string(),
            mr.cf_outcome[i].to_string(),
            mr.cf_source[i].to_string(),
            u8::from(mr.pair_partner[i].is_some()).to_string(),
            mr.pair_partner[i].map_or_else(String::new, |p| p.to_string()),
            mr.distance[i].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the `cf_outcome` column of a match report, checking that unit ids
/// run from 0 in order.
pub fn read_match_counterfactuals(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| {
            FsrmError::parse(
                path.display().to_string(),
                format!("missing column `{name}`"),
            )
        })
    };
    let (id_col, cf_col) = (col("unit_id")?, col("cf_outcome")?);
    let mut out = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let rec = rec?;
        let loc = || format!("{} row {}", path.display(), k + 1);
        let id: usize = rec[id_col]
            .parse()
            .map_err(|_| FsrmError::parse(loc(), format!("bad unit_id `{}`", &rec[id_col])))?;
        if id != k {
            return Err(FsrmError::parse(
                loc(),
                format!("unit_id {id} out of order"),
            ));
        }
        let cf: f64 = rec[cf_col]
            .parse()
            .map_err(|_| FsrmError::parse(loc(), format!("bad cf_outcome `{}`", &rec[cf_col])))?;
        out.push(cf);
    }
    Ok(out)
}

pub fn write_metrics_csv(
    report: &MetricReport,
    ate_hat: f64,
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["n_units", "ate_hat", "eps_ate", "pehe", "sqrt_pehe"])?;
    w.write_record([
        report.n_units.to_string(),
        ate_hat.to_string(),
        report.eps_ate.to_string(),
        report.pehe.to_string(),
        report.sqrt_pehe.to_string(),
    ])?;
    w.flush()?;
    Ok(())
}

/// Per-feature selection weight and normalized importance.
pub fn write_importance_csv(
    params: &NetworkParams,
    importance: &[f64],
    path: impl AsRef<Path>,
) -> Result<()> {
    let weights = params.selection.as_deref().unwrap_or(&[]);
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["feature", "weight", "importance"])?;
    for (j, (wt, imp)) in weights.iter().zip(importance).enumerate() {
        w.write_record([format!("x{j}"), wt.to_string(), imp.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
