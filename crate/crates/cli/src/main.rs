use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use fsrm_core::datagen::{augment_irrelevant, read_dataset, write_dataset};
use fsrm_core::eval::{estimate_from_counterfactuals, feature_importance, metrics};
use fsrm_core::harness::{
    bias_sweep, hyper_search, random_grid, read_match_counterfactuals, realization_dataset,
    run_experiment, write_history_csv, write_importance_csv, write_match_report, write_metrics_csv,
    ExperimentConfig,
};
use fsrm_core::matching::DistanceMetric;
use fsrm_core::network::{train, TrainedModel};
use fsrm_core::numcore::RandomStream;

#[derive(Parser)]
#[command(
    name = "fsrm",
    version,
    about = "Treatment effect estimation by feature selection representation matching"
)]
struct Cli {
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Experiment config file (key = value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Matching distance; repeat to evaluate several.
    #[arg(long, global = true)]
    metric: Vec<DistanceMetric>,
    /// Drop the feature-selection layer and its penalties.
    #[arg(long, global = true)]
    no_fsl: bool,
    /// Drop the balancing penalty.
    #[arg(long, global = true)]
    no_ipm: bool,
    #[arg(long, global = true)]
    realizations: Option<usize>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write one synthetic realization as a dataset CSV.
    Generate {
        #[arg(long, default_value_t = 0)]
        realization: usize,
        /// Selection-bias strength in [0, 1].
        #[arg(long)]
        q: Option<f64>,
    },
    /// Append irrelevant noise columns to a dataset.
    Augment {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        k: usize,
    },
    /// Train on a dataset and write a checkpoint plus a history CSV.
    Train {
        #[arg(long)]
        input: PathBuf,
        /// History CSV; defaults to the checkpoint path with `.history.csv`.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Impute counterfactuals by matching on a trained representation.
    Match {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Score a match report against a dataset's ground truth.
    Evaluate {
        #[arg(long)]
        matches: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Run replicated realizations and write per-realization and summary CSVs.
    Experiment,
    /// Run one experiment per bias strength.
    SweepBias {
        /// Comma-separated q values.
        #[arg(long, value_delimiter = ',', required = true)]
        q: Vec<f64>,
    },
    /// Random hyperparameter search; writes the ranking CSV.
    Search {
        #[arg(long, default_value_t = 24)]
        budget: usize,
    },
    /// Per-feature importance of a checkpoint.
    Importance {
        #[arg(long)]
        model: PathBuf,
    },
}

impl Cli {
    fn experiment_config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)
                .with_context(|| format!("reading config {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if !self.metric.is_empty() {
            cfg.metrics = self.metric.clone();
        }
        cfg.disable_fsl |= self.no_fsl;
        cfg.disable_ipm |= self.no_ipm;
        if let Some(n) = self.realizations {
            cfg.n_realizations = n;
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = Some(o.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out(&self) -> Result<&Path> {
        match &self.out {
            Some(p) => Ok(p),
            None => bail!("--out is required for this subcommand"),
        }
    }

    fn single_metric(&self) -> Result<DistanceMetric> {
        match self.metric.as_slice() {
            [] => Ok(DistanceMetric::Euclidean),
            [m] => Ok(*m),
            _ => bail!("this subcommand takes a single --metric"),
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate { realization, q } => {
            let mut cfg = cli.experiment_config()?;
            if let Some(q) = q {
                cfg.q = *q;
            }
            let ds = realization_dataset(&cfg, *realization)?;
            write_dataset(&ds, cli.out()?)?;
        }
        Command::Augment { input, k } => {
            let ds = read_dataset(input)?;
            let mut stream = RandomStream::new(cli.seed.unwrap_or(0));
            write_dataset(&augment_irrelevant(&ds, *k, &mut stream)?, cli.out()?)?;
        }
        Command::Train { input, history } => {
            let cfg = cli.experiment_config()?;
            let ds = read_dataset(input)?;
            let outcome = train(
                &cfg.effective_train_config(),
                &ds,
                &mut RandomStream::new(cfg.seed),
            )?;
            let out = cli.out()?;
            outcome.model.save(out)?;
            let history = history
                .clone()
                .unwrap_or_else(|| out.with_extension("history.csv"));
            write_history_csv(&outcome.history, history)?;
        }
        Command::Match { model, input } => {
            let model = TrainedModel::load(model)
                .with_context(|| format!("loading {}", model.display()))?;
            let ds = read_dataset(input)?;
            let fr = model.predict(&ds.x, &ds.t)?;
            let mr = fsrm_core::matching::impute_counterfactuals(
                &ds,
                &fr.representation,
                cli.single_metric()?,
                Some(&fr.p_treated),
            )?;
            write_match_report(&ds, &mr, cli.out()?)?;
        }
        Command::Evaluate { matches, input } => {
            let ds = read_dataset(input)?;
            let cf = read_match_counterfactuals(matches)?;
            let est = estimate_from_counterfactuals(&ds, &cf)?;
            write_metrics_csv(&metrics(&est)?, est.ate_hat, cli.out()?)?;
        }
        Command::Experiment => {
            let cfg = cli.experiment_config()?;
            let res = run_experiment(&cfg)?;
            for s in &res.summary {
                println!(
                    "{}: sqrt_pehe {:.4} ± {:.4}, eps_ate {:.4} ± {:.4} ({} ok, {} failed)",
                    s.metric,
                    s.mean_sqrt_pehe,
                    s.std_sqrt_pehe,
                    s.mean_eps_ate,
                    s.std_eps_ate,
                    s.n_ok,
                    s.n_failed
                );
            }
        }
        Command::SweepBias { q } => {
            let cfg = cli.experiment_config()?;
            for r in bias_sweep(&cfg, q)? {
                println!(
                    "q={} {}: sqrt_pehe {:.4}, eps_ate {:.4}",
                    r.q, r.summary.metric, r.summary.mean_sqrt_pehe, r.summary.mean_eps_ate
                );
            }
        }
        Command::Search { budget } => {
            let cfg = cli.experiment_config()?;
            let grid = random_grid(
                &cfg.train,
                *budget,
                &mut RandomStream::new(cfg.seed).split(u64::MAX),
            );
            let res = hyper_search(&cfg, &grid)?;
            let best = res.best();
            println!(
                "best candidate {} (validation factual loss {:.6})",
                best.index, best.score
            );
        }
        Command::Importance { model } => {
            let model = TrainedModel::load(model)
                .with_context(|| format!("loading {}", model.display()))?;
            let imp = feature_importance(&model.params)?;
            write_importance_csv(&model.params, &imp, cli.out()?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
