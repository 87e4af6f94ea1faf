//! Datasets, the synthetic benchmark generator, and CSV interchange.

mod io;
mod synthetic;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{FsrmError, Result};
use crate::numcore::{mvn_sample, random_correlation_covariance, Matrix, RandomStream};

pub use io::{read_dataset, write_dataset};
pub use synthetic::{biased_resample, generate_pool, generate_synthetic, SyntheticSpec};

/// Role a covariate column plays in the data-generating process.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlockLabel {
    Confounder,
    Adjustment,
    Instrument,
    Irrelevant,
    Unknown,
}

impl BlockLabel {
    pub const ALL: [BlockLabel; 5] = [
        BlockLabel::Confounder,
        BlockLabel::Adjustment,
        BlockLabel::Instrument,
        BlockLabel::Irrelevant,
        BlockLabel::Unknown,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BlockLabel::Confounder => "confounder",
            BlockLabel::Adjustment => "adjustment",
            BlockLabel::Instrument => "instrument",
            BlockLabel::Irrelevant => "irrelevant",
            BlockLabel::Unknown => "unknown",
        }
    }
}

impl fmt::Display for BlockLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BlockLabel {
    type Err = FsrmError;

    fn from_str(s: &str) -> Result<Self> {
        BlockLabel::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| FsrmError::invalid(format!("unknown block label `{s}`")))
    }
}

/// Observational dataset: covariates, treatment, factual outcome and whatever
/// ground truth the source provides.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub t: Vec<bool>,
    pub y_f: Vec<f64>,
    pub y_cf: Option<Vec<f64>>,
    pub mu0: Option<Vec<f64>>,
    pub mu1: Option<Vec<f64>>,
    pub e0: Option<Vec<f64>>,
    pub block_labels: Option<Vec<BlockLabel>>,
}

impl Dataset {
    pub fn new(x: Matrix, t: Vec<bool>, y_f: Vec<f64>) -> Result<Self> {
        let ds = Dataset {
            x,
            t,
            y_f,
            y_cf: None,
            mu0: None,
            mu1: None,
            e0: None,
            block_labels: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn n(&self) -> usize {
        self.t.len()
    }

    pub fn d(&self) -> usize {
        self.x.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.t.len();
        if self.x.rows() != n || self.y_f.len() != n {
            return Err(FsrmError::invalid(format!(
                "dataset lengths disagree: x has {} rows, t {}, yf {}",
                self.x.rows(),
                n,
                self.y_f.len()
            )));
        }
        for (name, col) in [
            ("ycf", &self.y_cf),
            ("mu0", &self.mu0),
            ("mu1", &self.mu1),
            ("e0", &self.e0),
        ] {
            if let Some(v) = col {
                if v.len() != n {
                    return Err(FsrmError::invalid(format!(
                        "{name} has {} entries, expected {n}",
                        v.len()
                    )));
                }
            }
        }
        if self.mu0.is_some() != self.mu1.is_some() {
            return Err(FsrmError::invalid("mu0 and mu1 must be given together"));
        }
        if let Some(e0) = &self.e0 {
            if let Some(i) = e0.iter().position(|&p| !(p > 0.0 && p < 1.0)) {
                return Err(FsrmError::invalid(format!(
                    "e0[{i}] = {} outside (0, 1)",
                    e0[i]
                )));
            }
        }
        if let Some(labels) = &self.block_labels {
            if labels.len() != self.d() {
                return Err(FsrmError::invalid(format!(
                    "{} block labels for {} columns",
                    labels.len(),
                    self.d()
                )));
            }
        }
        Ok(())
    }

    pub fn treated_indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.t[i]).collect()
    }

    pub fn control_indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| !self.t[i]).collect()
    }

    pub fn n_treated(&self) -> usize {
        self.t.iter().filter(|&&t| t).count()
    }

    /// Ground-truth ITE: `mu1 - mu0` when the noiseless means are known,
    /// otherwise derived from the counterfactual outcome.
    pub fn true_ite(&self) -> Option<Vec<f64>> {
        if let (Some(m0), Some(m1)) = (&self.mu0, &self.mu1) {
            return Some(m1.iter().zip(m0).map(|(a, b)| a - b).collect());
        }
        let ycf = self.y_cf.as_ref()?;
        Some(
            (0..self.n())
                .map(|i| {
                    if self.t[i] {
                        self.y_f[i] - ycf[i]
                    } else {
                        ycf[i] - self.y_f[i]
                    }
                })
                .collect(),
        )
    }

    /// Rows `idx` in the given order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let pick = |v: &Vec<f64>| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Dataset {
            x: self.x.select_rows(idx),
            t: idx.iter().map(|&i| self.t[i]).collect(),
            y_f: pick(&self.y_f),
            y_cf: self.y_cf.as_ref().map(pick),
            mu0: self.mu0.as_ref().map(pick),
            mu1: self.mu1.as_ref().map(pick),
            e0: self.e0.as_ref().map(pick),
            block_labels: self.block_labels.clone(),
        }
    }

    /// Column indices carrying `label`.
    pub fn columns_with(&self, label: BlockLabel) -> Vec<usize> {
        match &self.block_labels {
            Some(labels) => (0..labels.len()).filter(|&j| labels[j] == label).collect(),
            None => Vec::new(),
        }
    }
}

/// Appends `k` correlated noise columns unrelated to treatment and outcome.
pub fn augment_irrelevant(ds: &Dataset, k: usize, stream: &mut RandomStream) -> Result<Dataset> {
    if k == 0 {
        return Err(FsrmError::invalid("augment_irrelevant needs k >= 1"));
    }
    let cov = random_correlation_covariance(k, stream)?;
    let noise = mvn_sample(ds.n(), &cov, stream)?;
    let mut labels = ds
        .block_labels
        .clone()
        .unwrap_or_else(|| vec![BlockLabel::Unknown; ds.d()]);
    labels.extend(std::iter::repeat_n(BlockLabel::Irrelevant, k));
    let mut out = ds.clone();
    out.x = ds.x.hstack(&noise)?;
    out.block_labels = Some(labels);
    out.validate()?;
    Ok(out)
}
