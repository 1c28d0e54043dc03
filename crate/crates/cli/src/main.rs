//! `seqcast`: ingest daily case files, run repeated-training experiments,
//! produce recursive forecasts, check gradients and summarise the data.

mod cache;
mod commands;
mod config;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};

use seqcast::experiment::{Feedback, NormalizeScope, SplitKind};
use seqcast::training::BatchMode;
use seqcast::{CellFormula, Variant};

use config::{parse_batch, parse_cell_formula, parse_feedback, parse_split, parse_variant, RunConfig};
use rundir::RunDir;

#[derive(Parser, Debug)]
#[command(name = "seqcast", version, about = "Recurrent-network forecasting of daily case counts")]
struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Base seed for splits, initialisation, shuffling and dropout.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for independent runs.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output root (default: $SEQCAST_OUT or ./seqcast-out).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Clean, smooth and normalise a case file into a cache.
    Ingest {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        window: WindowArgs,
    },
    /// Train and evaluate models over repeated runs.
    Experiment {
        #[command(flatten)]
        target: TargetArgs,
        /// Model variant (repeatable): lstm, bd-lstm, ed-lstm.
        #[arg(long = "variant", value_parser = parse_variant)]
        variants: Vec<Variant>,
        /// Split protocol (repeatable): static, random.
        #[arg(long = "split", value_parser = parse_split)]
        splits: Vec<SplitKind>,
        /// Independent training runs per model.
        #[arg(long)]
        runs: Option<usize>,
        #[command(flatten)]
        window: WindowArgs,
        #[command(flatten)]
        embedding: EmbeddingArgs,
        #[command(flatten)]
        training: TrainArgs,
    },
    /// Recursive multi-week forecast with an ensemble band.
    Forecast {
        #[command(flatten)]
        target: TargetArgs,
        /// Model variant: lstm, bd-lstm, ed-lstm.
        #[arg(long, value_parser = parse_variant)]
        variant: Option<Variant>,
        /// Models in the ensemble.
        #[arg(long)]
        runs: Option<usize>,
        /// Days to forecast past the end of the analysis window.
        #[arg(long)]
        days: Option<usize>,
        /// Values fed back per iteration: all-steps or one-step.
        #[arg(long, value_parser = parse_feedback)]
        feedback: Option<Feedback>,
        /// Forecast from saved checkpoints instead of training (repeatable).
        #[arg(long = "checkpoint", value_name = "PATH")]
        checkpoints: Vec<PathBuf>,
        /// Save the trained models as checkpoints.
        #[arg(long)]
        save_checkpoints: bool,
        #[command(flatten)]
        window: WindowArgs,
        #[command(flatten)]
        embedding: EmbeddingArgs,
        #[command(flatten)]
        training: TrainArgs,
    },
    /// Compare analytic and finite-difference gradients on tiny networks.
    Gradcheck {
        /// Central-difference step.
        #[arg(long)]
        epsilon: Option<f64>,
        /// Largest acceptable relative error.
        #[arg(long)]
        threshold: Option<f64>,
        /// Cell update: standard or squashed.
        #[arg(long, value_parser = parse_cell_formula)]
        cell_formula: Option<CellFormula>,
        /// Adds a constant to every analytic gradient entry (fault injection).
        #[arg(long, hide = true, default_value_t = 0.0)]
        perturb: f64,
    },
    /// Monthly rankings and weekly averages of a case file.
    Summarize {
        #[command(flatten)]
        data: DataArgs,
        /// Ranking month as YYYY-MM (repeatable); ranks the previous month's cases.
        #[arg(long = "month")]
        months: Vec<String>,
        /// Regions per ranking.
        #[arg(long)]
        top: Option<usize>,
        /// Also write weekly averages.
        #[arg(long)]
        weekly: bool,
        /// Region for the weekly table (repeatable).
        #[arg(long = "region")]
        regions: Vec<String>,
    },
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Case CSV with columns date,region,new_cases.
    #[arg(long, value_name = "CSV")]
    data: Option<PathBuf>,
    /// The new_cases column holds running totals.
    #[arg(long)]
    cumulative: bool,
}

#[derive(Args, Debug)]
struct TargetArgs {
    /// Cache written by `seqcast ingest`.
    #[arg(long, value_name = "PATH")]
    cache: Option<PathBuf>,
    /// Target region; the national total is the sum of all regions.
    #[arg(long)]
    region: Option<String>,
    /// Add neighbouring regions as input features.
    #[arg(long)]
    multivariate: bool,
}

#[derive(Args, Debug)]
struct WindowArgs {
    /// First day of the analysis window.
    #[arg(long)]
    start: Option<NaiveDate>,
    /// Last day of the analysis window.
    #[arg(long)]
    end: Option<NaiveDate>,
    /// Static split boundary.
    #[arg(long)]
    boundary: Option<NaiveDate>,
    /// Trailing rolling-mean length in days.
    #[arg(long)]
    rolling_window: Option<usize>,
    /// Normalisation range: full or train.
    #[arg(long, value_parser = parse_scope)]
    normalize_scope: Option<NormalizeScope>,
}

#[derive(Args, Debug)]
struct EmbeddingArgs {
    /// Embedding dimension D.
    #[arg(long)]
    dimension: Option<usize>,
    /// Time lag T between window elements.
    #[arg(long)]
    time_lag: Option<usize>,
    /// Prediction horizons (multi-step-ahead outputs).
    #[arg(long)]
    horizons: Option<usize>,
    /// Use D consecutive days instead of a lagged window.
    #[arg(long)]
    contiguous: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Passes over the training set (default 100).
    #[arg(long)]
    epochs: Option<usize>,
    /// Adam step size (default 0.005, or 0.002 for ed-lstm).
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Adam first-moment decay.
    #[arg(long)]
    beta1: Option<f64>,
    /// Adam second-moment decay.
    #[arg(long)]
    beta2: Option<f64>,
    /// Adam denominator constant.
    #[arg(long)]
    adam_epsilon: Option<f64>,
    /// Samples per update: a positive integer or `full`.
    #[arg(long, value_parser = parse_batch)]
    batch: Option<BatchMode>,
    /// Dropout rate on LSTM outputs during training (default 0.2).
    #[arg(long)]
    dropout: Option<f64>,
    /// Rescale gradients whose L2 norm exceeds this.
    #[arg(long)]
    clip_norm: Option<f64>,
    /// Stop after this many epochs without a lower training loss.
    #[arg(long)]
    patience: Option<usize>,
    /// Cell update: standard or squashed.
    #[arg(long, value_parser = parse_cell_formula)]
    cell_formula: Option<CellFormula>,
}

fn parse_scope(s: &str) -> Result<NormalizeScope, String> {
    match s {
        "full" => Ok(NormalizeScope::Full),
        "train" => Ok(NormalizeScope::Train),
        _ => Err(format!("unknown normalisation scope `{s}` (full | train)")),
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl DataArgs {
    fn apply(self, cfg: &mut RunConfig) {
        if self.data.is_some() {
            cfg.data = self.data;
        }
        cfg.cumulative |= self.cumulative;
    }
}

impl TargetArgs {
    fn apply(self, cfg: &mut RunConfig) {
        if self.cache.is_some() {
            cfg.cache = self.cache;
        }
        set(&mut cfg.region, self.region);
        cfg.multivariate |= self.multivariate;
    }
}

impl WindowArgs {
    fn apply(self, cfg: &mut RunConfig) {
        let w = &mut cfg.window;
        set(&mut w.start, self.start);
        set(&mut w.end, self.end);
        set(&mut w.boundary, self.boundary);
        set(&mut w.rolling_window, self.rolling_window);
        set(&mut w.normalize_scope, self.normalize_scope);
    }
}

impl EmbeddingArgs {
    fn apply(self, cfg: &mut RunConfig) {
        let e = &mut cfg.embedding;
        set(&mut e.dimension, self.dimension);
        set(&mut e.time_lag, self.time_lag);
        set(&mut e.horizons, self.horizons);
        e.contiguous |= self.contiguous;
    }
}

impl TrainArgs {
    fn apply(self, cfg: &mut RunConfig) {
        let t = &mut cfg.training;
        set(&mut t.epochs, self.epochs);
        if self.learning_rate.is_some() {
            t.learning_rate = self.learning_rate;
        }
        set(&mut t.beta1, self.beta1);
        set(&mut t.beta2, self.beta2);
        set(&mut t.epsilon, self.adam_epsilon);
        set(&mut t.batch_mode, self.batch);
        set(&mut t.dropout_rate, self.dropout);
        if self.clip_norm.is_some() {
            t.clip_norm = self.clip_norm;
        }
        if self.patience.is_some() {
            t.patience = self.patience;
        }
        set(&mut cfg.cell_formula, self.cell_formula);
    }
}

/// Command name and resolved configuration (flag > file > default), plus
/// the fault-injection offset for `gradcheck`.
fn resolve(cli: Cli) -> Result<(&'static str, RunConfig, f64)> {
    let mut cfg = RunConfig::from_file_or_default(cli.config.as_deref())?;
    set(&mut cfg.seed, cli.seed);
    if cli.workers.is_some() {
        cfg.workers = cli.workers;
    }
    if cli.out.is_some() {
        cfg.out = cli.out;
    }
    let mut perturb = 0.0;
    let name = match cli.command {
        Command::Ingest { data, window } => {
            data.apply(&mut cfg);
            window.apply(&mut cfg);
            "ingest"
        }
        Command::Experiment {
            target,
            variants,
            splits,
            runs,
            window,
            embedding,
            training,
        } => {
            target.apply(&mut cfg);
            if !variants.is_empty() {
                cfg.variants = variants;
            }
            if !splits.is_empty() {
                cfg.splits = splits;
            }
            set(&mut cfg.runs, runs);
            window.apply(&mut cfg);
            embedding.apply(&mut cfg);
            training.apply(&mut cfg);
            "experiment"
        }
        Command::Forecast {
            target,
            variant,
            runs,
            days,
            feedback,
            checkpoints,
            save_checkpoints,
            window,
            embedding,
            training,
        } => {
            target.apply(&mut cfg);
            let f = &mut cfg.forecast;
            set(&mut f.variant, variant);
            if runs.is_some() {
                f.runs = runs;
            }
            set(&mut f.days, days);
            set(&mut f.feedback, feedback);
            if !checkpoints.is_empty() {
                f.checkpoints = checkpoints;
            }
            f.save_checkpoints |= save_checkpoints;
            window.apply(&mut cfg);
            embedding.apply(&mut cfg);
            training.apply(&mut cfg);
            "forecast"
        }
        Command::Gradcheck {
            epsilon,
            threshold,
            cell_formula,
            perturb: p,
        } => {
            set(&mut cfg.gradcheck.epsilon, epsilon);
            set(&mut cfg.gradcheck.threshold, threshold);
            set(&mut cfg.cell_formula, cell_formula);
            perturb = p;
            "gradcheck"
        }
        Command::Summarize {
            data,
            months,
            top,
            weekly,
            regions,
        } => {
            data.apply(&mut cfg);
            let s = &mut cfg.summarize;
            if !months.is_empty() {
                s.months = months;
            }
            set(&mut s.top, top);
            s.weekly |= weekly;
            if !regions.is_empty() {
                s.regions = regions;
            }
            "summarize"
        }
    };
    Ok((name, cfg, perturb))
}

fn run(cli: Cli) -> Result<bool> {
    let (name, cfg, perturb) = resolve(cli)?;
    let mut out = RunDir::create(&cfg, name)?;
    let result = match name {
        "ingest" => commands::ingest(&cfg, &mut out).map(|()| true),
        "experiment" => commands::experiment(&cfg, &mut out).map(|()| true),
        "forecast" => commands::forecast(&cfg, &mut out).map(|()| true),
        "gradcheck" => commands::gradcheck(&cfg, &mut out, perturb),
        "summarize" => commands::summarize(&cfg, &mut out).map(|()| true),
        _ => unreachable!("every subcommand is dispatched"),
    };
    let message = match &result {
        Ok(true) => None,
        Ok(false) => Some("gradient check failed".to_string()),
        Err(e) => Some(format!("{e:#}")),
    };
    let dir = out.finish(&cfg, message.as_deref())?;
    println!("output: {}", dir.display());
    result
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: gradient check failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
