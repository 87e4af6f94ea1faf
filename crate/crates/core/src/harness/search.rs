use std::fs;

use log::warn;
use rayon::prelude::*;

use super::{pool, prepare_source, realization_data, ExperimentConfig};
use crate::error::{FsrmError, Result};
use crate::network::{train, ObjectiveBreakdown, TrainConfig};
use crate::numcore::RandomStream;

/// A scored candidate of a hyperparameter search.
#[derive(Clone, Debug)]
pub struct SearchCandidate {
    /// Position in the candidate list.
    pub index: usize,
    pub config: TrainConfig,
    /// Validation cross-entropy plus validation MSE at the kept checkpoint;
    /// infinite when training failed.
    pub score: f64,
    pub best_val: Option<ObjectiveBreakdown>,
}

#[derive(Clone, Debug)]
pub struct SearchResult {
    /// Every candidate, best first.
    pub ranking: Vec<SearchCandidate>,
}

impl SearchResult {
    pub fn best(&self) -> &SearchCandidate {
        &self.ranking[0]
    }
}

const DELTA_RANGE: &[f64] = &[
    0.0, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 0.2, 0.5, 2.0, 5.0,
];
const PENALTY_RANGE: &[f64] = &[0.0, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0, 0.2, 0.5];
const LAYER_DIMS: &[&[usize]] = &[&[200, 150, 100], &[200, 100, 50], &[100, 100], &[100, 50]];
const PRED_LAYERS: &[usize] = &[1, 2, 3, 4];
const PRED_WIDTHS: &[usize] = &[50, 100, 150];
const BATCH_SIZES: &[usize] = &[100, 200, 300];

/// `budget` random draws from the hyperparameter ranges, each starting from
/// `base` for the settings the ranges do not cover.
pub fn random_grid(
    base: &TrainConfig,
    budget: usize,
    stream: &mut RandomStream,
) -> Vec<TrainConfig> {
    fn pick<T: Clone>(options: &[T], stream: &mut RandomStream) -> T {
        options[stream.below(options.len())].clone()
    }
    (0..budget)
        .map(|_| TrainConfig {
            delta: pick(DELTA_RANGE, stream),
            gamma: pick(PENALTY_RANGE, stream),
            lambda_l2: pick(PENALTY_RANGE, stream),
            alpha_l1: pick(PENALTY_RANGE, stream),
            beta: pick(PENALTY_RANGE, stream),
            layer_dims: pick(LAYER_DIMS, stream).to_vec(),
            pred_layers: pick(PRED_LAYERS, stream),
            pred_width: pick(PRED_WIDTHS, stream),
            batch_size: pick(BATCH_SIZES, stream),
            ..base.clone()
        })
        .collect()
}

/// Trains every candidate on the first realization of `cfg` and ranks them
/// by factual loss on its held-out validation split.
///
/// The raw training objective is not used for ranking because its weights
/// differ between candidates. Ties keep candidate order. With an output
/// directory the ranking is written to `search_ranking.csv`.
pub fn hyper_search(cfg: &ExperimentConfig, candidates: &[TrainConfig]) -> Result<SearchResult> {
    if candidates.is_empty() {
        return Err(FsrmError::invalid("empty hyperparameter grid"));
    }
    cfg.validate()?;
    let master = RandomStream::new(cfg.seed);
    let source = prepare_source(cfg, &master)?;
    let stream = master.split(1);
    let ds = realization_data(cfg, &source, &stream, 0)?;

    let mut ranking: Vec<SearchCandidate> = pool(cfg.workers)?.install(|| {
        candidates
            .par_iter()
            .enumerate()
            .map(|(index, cand)| {
                let effective = ExperimentConfig {
                    train: cand.clone(),
                    ..cfg.clone()
                }
                .effective_train_config();
                let best_val = match train(&effective, &ds, &mut stream.split(3)) {
                    Ok(out) => Some(out.best_val),
                    Err(e) => {
                        warn!("candidate {index} failed: {e}");
                        None
                    }
                };
                let score = best_val
                    .map(|b| b.treatment + b.outcome_mse)
                    .filter(|s| s.is_finite())
                    .unwrap_or(f64::INFINITY);
                SearchCandidate {
                    index,
                    config: cand.clone(),
                    score,
                    best_val,
                }
            })
            .collect()
    });
    ranking.sort_by(|a, b| a.score.total_cmp(&b.score).then(a.index.cmp(&b.index)));

    if let Some(dir) = &cfg.out_dir {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("search_ranking.csv"))?;
        w.write_record([
            "rank",
            "candidate",
            "score",
            "delta",
            "gamma",
            "lambda_l2",
            "alpha_l1",
            "beta",
            "layer_dims",
            "pred_layers",
            "pred_width",
            "batch_size",
            "learning_rate",
        ])?;
        for (rank, c) in ranking.iter().enumerate() {
            let t = &c.config;
            let dims: Vec<String> = t.layer_dims.iter().map(|d| d.to_string()).collect();
            w.write_record([
                rank.to_string(),
                c.index.to_string(),
                c.score.to_string(),
                t.delta.to_string(),
                t.gamma.to_string(),
                t.lambda_l2.to_string(),
                t.alpha_l1.to_string(),
                t.beta.to_string(),
                dims.join(","),
                t.pred_layers.to_string(),
                t.pred_width.to_string(),
                t.batch_size.to_string(),
                t.learning_rate.to_string(),
            ])?;
        }
        w.flush()?;
    }
    Ok(SearchResult { ranking })
}
