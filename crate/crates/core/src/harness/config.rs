use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::balance::GradientMode;
use crate::error::{FsrmError, Result};
use crate::matching::DistanceMetric;
use crate::network::TrainConfig;

/// Where each realization's data comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// The synthetic benchmark. Weight vectors are drawn from the master seed.
    Synthetic {
        n_confounders: usize,
        n_adjustment: usize,
        n_instruments: usize,
        n_irrelevant: usize,
        noise_std: f64,
        pool_treated: usize,
        pool_control: usize,
    },
    /// A dataset CSV; a `{}` in the path is replaced by the realization index.
    Csv(String),
}

impl DataSource {
    pub fn standard_synthetic() -> DataSource {
        DataSource::Synthetic {
            n_confounders: 15,
            n_adjustment: 15,
            n_instruments: 10,
            n_irrelevant: 20,
            noise_std: 1.0,
            pool_treated: 1000,
            pool_control: 1000,
        }
    }

    /// Path of realization `i` for a CSV source.
    pub fn csv_path(&self, i: usize) -> Option<PathBuf> {
        match self {
            DataSource::Csv(p) => Some(PathBuf::from(p.replace("{}", &i.to_string()))),
            DataSource::Synthetic { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub data: DataSource,
    /// Units drawn per group from the pool in each realization.
    pub draw_treated: usize,
    pub draw_control: usize,
    pub metrics: Vec<DistanceMetric>,
    pub n_realizations: usize,
    pub seed: u64,
    pub q: f64,
    pub disable_fsl: bool,
    pub disable_ipm: bool,
    /// Irrelevant noise columns appended to every realization.
    pub augment_irrelevant: usize,
    pub out_dir: Option<PathBuf>,
    /// Worker threads; 0 uses every available core.
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            train: TrainConfig::default(),
            data: DataSource::standard_synthetic(),
            draw_treated: 250,
            draw_control: 750,
            metrics: vec![DistanceMetric::Euclidean],
            n_realizations: 100,
            seed: 0,
            q: 0.0,
            disable_fsl: false,
            disable_ipm: false,
            augment_irrelevant: 0,
            out_dir: None,
            workers: 0,
        }
    }
}

fn value<T: FromStr>(key: &str, raw: &str, line: usize) -> Result<T> {
    raw.parse().map_err(|_| {
        FsrmError::parse(
            format!("line {line}"),
            format!("bad value `{raw}` for `{key}`"),
        )
    })
}

fn bool_value(key: &str, raw: &str, line: usize) -> Result<bool> {
    match raw {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(FsrmError::parse(
            format!("line {line}"),
            format!("bad boolean `{raw}` for `{key}`"),
        )),
    }
}

fn list<T: FromStr>(key: &str, raw: &str, line: usize) -> Result<Vec<T>> {
    if raw.is_empty() {
        return Ok(Vec::new());
    }
    raw.split(',').map(|s| value(key, s.trim(), line)).collect()
}

fn gradient_mode(raw: &str, line: usize) -> Result<GradientMode> {
    match raw {
        "unrolled" => Ok(GradientMode::Unrolled),
        "envelope" => Ok(GradientMode::Envelope),
        _ => Err(FsrmError::parse(
            format!("line {line}"),
            format!("bad ipm_gradient `{raw}` (unrolled, envelope)"),
        )),
    }
}

impl ExperimentConfig {
    /// Parses `key = value` lines over the defaults. `#` starts a comment;
    /// unknown and repeated keys are errors.
    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = Vec::new();
        let mut synthetic = match cfg.data.clone() {
            DataSource::Synthetic {
                n_confounders,
                n_adjustment,
                n_instruments,
                n_irrelevant,
                noise_std,
                pool_treated,
                pool_control,
            } => (
                n_confounders,
                n_adjustment,
                n_instruments,
                n_irrelevant,
                noise_std,
                pool_treated,
                pool_control,
            ),
            DataSource::Csv(_) => unreachable!(),
        };
        let mut dataset = None;
        for (k, raw_line) in text.lines().enumerate() {
            let line = k + 1;
            let content = raw_line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, raw) = content.split_once('=').ok_or_else(|| {
                FsrmError::parse(format!("line {line}"), "expected `key = value`")
            })?;
            let (key, raw) = (key.trim(), raw.trim());
            if seen.contains(&key.to_string()) {
                return Err(FsrmError::parse(
                    format!("line {line}"),
                    format!("`{key}` given twice"),
                ));
            }
            seen.push(key.to_string());
            let t = &mut cfg.train;
            match key {
                "delta" => t.delta = value(key, raw, line)?,
                "gamma" => t.gamma = value(key, raw, line)?,
                "lambda_l2" => t.lambda_l2 = value(key, raw, line)?,
                "alpha_l1" => t.alpha_l1 = value(key, raw, line)?,
                "beta" => t.beta = value(key, raw, line)?,
                "layer_dims" => t.layer_dims = list(key, raw, line)?,
                "pred_layers" => t.pred_layers = value(key, raw, line)?,
                "pred_width" => t.pred_width = value(key, raw, line)?,
                "feature_selection" => t.feature_selection = bool_value(key, raw, line)?,
                "batch_size" => t.batch_size = value(key, raw, line)?,
                "dropout_rate" => t.dropout_rate = value(key, raw, line)?,
                "learning_rate" => t.learning_rate = value(key, raw, line)?,
                "adam_beta1" => t.adam_beta1 = value(key, raw, line)?,
                "adam_beta2" => t.adam_beta2 = value(key, raw, line)?,
                "adam_eps" => t.adam_eps = value(key, raw, line)?,
                "max_epochs" => t.max_epochs = value(key, raw, line)?,
                "patience" => t.patience = value(key, raw, line)?,
                "val_fraction" => t.val_fraction = value(key, raw, line)?,
                "sinkhorn_eps" => t.sinkhorn_eps = value(key, raw, line)?,
                "sinkhorn_iters" => t.sinkhorn_iters = value(key, raw, line)?,
                "ipm_gradient" => t.ipm_gradient = gradient_mode(raw, line)?,
                "dataset" => dataset = Some(raw.to_string()),
                "n_confounders" => synthetic.0 = value(key, raw, line)?,
                "n_adjustment" => synthetic.1 = value(key, raw, line)?,
                "n_instruments" => synthetic.2 = value(key, raw, line)?,
                "n_irrelevant" => synthetic.3 = value(key, raw, line)?,
                "noise_std" => synthetic.4 = value(key, raw, line)?,
                "pool_treated" => synthetic.5 = value(key, raw, line)?,
                "pool_control" => synthetic.6 = value(key, raw, line)?,
                "draw_treated" => cfg.draw_treated = value(key, raw, line)?,
                "draw_control" => cfg.draw_control = value(key, raw, line)?,
                "metrics" => cfg.metrics = list(key, raw, line)?,
                "n_realizations" => cfg.n_realizations = value(key, raw, line)?,
                "seed" => cfg.seed = value(key, raw, line)?,
                "q" => cfg.q = value(key, raw, line)?,
                "disable_fsl" => cfg.disable_fsl = bool_value(key, raw, line)?,
                "disable_ipm" => cfg.disable_ipm = bool_value(key, raw, line)?,
                "augment_irrelevant" => cfg.augment_irrelevant = value(key, raw, line)?,
                "out_dir" => cfg.out_dir = Some(PathBuf::from(raw)),
                "workers" => cfg.workers = value(key, raw, line)?,
                _ => {
                    return Err(FsrmError::parse(
                        format!("line {line}"),
                        format!("unknown key `{key}`"),
                    ))
                }
            }
        }
        cfg.data = match dataset {
            Some(path) => DataSource::Csv(path),
            None => DataSource::Synthetic {
                n_confounders: synthetic.0,
                n_adjustment: synthetic.1,
                n_instruments: synthetic.2,
                n_irrelevant: synthetic.3,
                noise_std: synthetic.4,
                pool_treated: synthetic.5,
                pool_control: synthetic.6,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
        ExperimentConfig::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.effective_train_config().validate()?;
        if self.metrics.is_empty() {
            return Err(FsrmError::Config("at least one metric is required".into()));
        }
        if self.n_realizations == 0 {
            return Err(FsrmError::Config("n_realizations must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.q) {
            return Err(FsrmError::Config(format!("q = {} outside [0, 1]", self.q)));
        }
        if let DataSource::Synthetic {
            noise_std,
            pool_treated,
            pool_control,
            ..
        } = self.data
        {
            if !(noise_std >= 0.0 && noise_std.is_finite()) {
                return Err(FsrmError::Config(format!(
                    "noise_std = {noise_std} must be finite and >= 0"
                )));
            }
            if self.draw_treated > pool_treated || self.draw_control > pool_control {
                return Err(FsrmError::Config("draw sizes exceed pool sizes".into()));
            }
        }
        Ok(())
    }

    /// Training configuration after the ablation switches are applied.
    pub fn effective_train_config(&self) -> TrainConfig {
        let mut t = self.train.clone();
        if self.disable_fsl {
            t.feature_selection = false;
            t.lambda_l2 = 0.0;
            t.alpha_l1 = 0.0;
        }
        if self.disable_ipm {
            t.gamma = 0.0;
        }
        t
    }

    /// Renders the configuration in the format read by [`ExperimentConfig::parse`].
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let join = |v: &[String]| v.join(",");
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("delta", t.delta.to_string());
        kv("gamma", t.gamma.to_string());
        kv("lambda_l2", t.lambda_l2.to_string());
        kv("alpha_l1", t.alpha_l1.to_string());
        kv("beta", t.beta.to_string());
        kv(
            "layer_dims",
            join(
                &t.layer_dims
                    .iter()
                    .map(|d| d.to_string())
                    .collect::<Vec<_>>(),
            ),
        );
        kv("pred_layers", t.pred_layers.to_string());
        kv("pred_width", t.pred_width.to_string());
        kv("feature_selection", t.feature_selection.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("dropout_rate", t.dropout_rate.to_string());
        kv("learning_rate", t.learning_rate.to_string());
        kv("adam_beta1", t.adam_beta1.to_string());
        kv("adam_beta2", t.adam_beta2.to_string());
        kv("adam_eps", t.adam_eps.to_string());
        kv("max_epochs", t.max_epochs.to_string());
        kv("patience", t.patience.to_string());
        kv("val_fraction", t.val_fraction.to_string());
        kv("sinkhorn_eps", t.sinkhorn_eps.to_string());
        kv("sinkhorn_iters", t.sinkhorn_iters.to_string());
        let mode = match t.ipm_gradient {
            GradientMode::Unrolled => "unrolled",
            GradientMode::Envelope => "envelope",
        };
        kv("ipm_gradient", mode.to_string());
        match &self.data {
            DataSource::Csv(p) => kv("dataset", p.clone()),
            DataSource::Synthetic {
                n_confounders,
                n_adjustment,
                n_instruments,
                n_irrelevant,
                noise_std,
                pool_treated,
                pool_control,
            } => {
                kv("n_confounders", n_confounders.to_string());
                kv("n_adjustment", n_adjustment.to_string());
                kv("n_instruments", n_instruments.to_string());
                kv("n_irrelevant", n_irrelevant.to_string());
                kv("noise_std", noise_std.to_string());
                kv("pool_treated", pool_treated.to_string());
                kv("pool_control", pool_control.to_string());
            }
        }
        kv("draw_treated", self.draw_treated.to_string());
        kv("draw_control", self.draw_control.to_string());
        kv(
            "metrics",
            join(
                &self
                    .metrics
                    .iter()
                    .map(|m| m.as_str().to_string())
                    .collect::<Vec<_>>(),
            ),
        );
        kv("n_realizations", self.n_realizations.to_string());
        kv("seed", self.seed.to_string());
        kv("q", self.q.to_string());
        kv("disable_fsl", self.disable_fsl.to_string());
        kv("disable_ipm", self.disable_ipm.to_string());
        kv("augment_irrelevant", self.augment_irrelevant.to_string());
        if let Some(dir) = &self.out_dir {
            kv("out_dir", dir.display().to_string());
        }
        kv("workers", self.workers.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(
            ExperimentConfig::parse("# nothing\n\n").unwrap(),
            ExperimentConfig::default()
        );
    }

    #[test]
    fn parses_keys_and_comments() {
        let cfg = ExperimentConfig::parse(
            "gamma = 0.2  # balance weight\nlayer_dims = 200, 100, 50\nmetrics = euclid,mahal\n\
             disable_ipm = true\nseed = 42\nipm_gradient = envelope\n",
        )
        .unwrap();
        assert_eq!(cfg.train.gamma, 0.2);
        assert_eq!(cfg.train.layer_dims, vec![200, 100, 50]);
        assert_eq!(
            cfg.metrics,
            vec![DistanceMetric::Euclidean, DistanceMetric::Mahalanobis]
        );
        assert!(cfg.disable_ipm);
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.train.ipm_gradient, GradientMode::Envelope);
        assert_eq!(cfg.effective_train_config().gamma, 0.0);
    }

    #[test]
    fn unknown_and_repeated_keys_fail() {
        let err = ExperimentConfig::parse("seed = 1\nlearning_rat = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(ExperimentConfig::parse("seed = 1\nseed = 2\n").is_err());
        assert!(ExperimentConfig::parse("seed 1\n").is_err());
        assert!(ExperimentConfig::parse("q = 1.5\n").is_err());
        assert!(ExperimentConfig::parse("disable_fsl = maybe\n").is_err());
    }

    #[test]
    fn ablations_rewrite_the_train_config() {
        let cfg = ExperimentConfig {
            disable_fsl: true,
            ..ExperimentConfig::default()
        };
        let t = cfg.effective_train_config();
        assert!(!t.feature_selection);
        assert_eq!((t.lambda_l2, t.alpha_l1), (0.0, 0.0));
        assert_eq!(t.gamma, cfg.train.gamma);
    }

    #[test]
    fn text_round_trip() {
        let cfg = ExperimentConfig {
            data: DataSource::Csv("data/ihdp_{}.csv".into()),
            metrics: DistanceMetric::ALL.to_vec(),
            q: 0.25,
            augment_irrelevant: 35,
            out_dir: Some("out".into()),
            ..ExperimentConfig::default()
        };
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(
            cfg.data.csv_path(3).unwrap(),
            PathBuf::from("data/ihdp_3.csv")
        );
    }
}
