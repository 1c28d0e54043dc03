//! Run configuration: defaults, JSON file, command-line overrides.
//!
//! Every field has a default. A `--config` file may set any subset of fields;
//! flags given on the command line win over both.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use seqcast::experiment::{AnalysisWindow, Feedback, SplitKind, NATIONAL};
use seqcast::training::{default_learning_rate, BatchMode, TrainConfig};
use seqcast::{embedding::EmbeddingConfig, CellFormula, Variant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Daily case CSV (`date,region,new_cases`).
    pub data: Option<PathBuf>,
    /// Treat `new_cases` as running totals and difference them.
    pub cumulative: bool,
    /// Cache written by `ingest`.
    pub cache: Option<PathBuf>,
    pub region: String,
    /// Use the region together with its neighbours (or every state for the
    /// national aggregate) as input features.
    pub multivariate: bool,
    pub variants: Vec<Variant>,
    pub splits: Vec<SplitKind>,
    pub window: AnalysisWindow,
    pub embedding: EmbeddingConfig,
    pub training: TrainSettings,
    pub cell_formula: CellFormula,
    pub runs: usize,
    pub seed: u64,
    /// Worker threads for independent runs; all available cores when unset.
    pub workers: Option<usize>,
    /// Output root; `SEQCAST_OUT` or `./seqcast-out` when unset.
    pub out: Option<PathBuf>,
    pub forecast: ForecastSettings,
    pub summarize: SummarizeSettings,
    pub gradcheck: GradcheckSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            cumulative: false,
            cache: None,
            region: NATIONAL.to_string(),
            multivariate: false,
            variants: Variant::ALL.to_vec(),
            splits: SplitKind::ALL.to_vec(),
            window: AnalysisWindow::default(),
            embedding: EmbeddingConfig::default(),
            training: TrainSettings::default(),
            cell_formula: CellFormula::default(),
            runs: 30,
            seed: 0,
            workers: None,
            out: None,
            forecast: ForecastSettings::default(),
            summarize: SummarizeSettings::default(),
            gradcheck: GradcheckSettings::default(),
        }
    }
}

/// Optimiser settings. `learning_rate: null` picks the per-variant default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub learning_rate: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_mode: BatchMode,
    pub dropout_rate: f64,
    pub clip_norm: Option<f64>,
    pub patience: Option<usize>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let base = TrainConfig::default();
        Self {
            epochs: base.epochs,
            learning_rate: None,
            beta1: base.beta1,
            beta2: base.beta2,
            epsilon: base.epsilon,
            batch_mode: base.batch_mode,
            dropout_rate: base.dropout_rate,
            clip_norm: base.clip_norm,
            patience: base.patience,
        }
    }
}

impl TrainSettings {
    pub fn resolve(&self, variant: Variant, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate.unwrap_or_else(|| default_learning_rate(variant)),
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            batch_mode: self.batch_mode,
            dropout_rate: self.dropout_rate,
            seed,
            clip_norm: self.clip_norm,
            patience: self.patience,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastSettings {
    pub variant: Variant,
    pub days: usize,
    pub feedback: Feedback,
    /// Models in the ensemble; `runs` when unset.
    pub runs: Option<usize>,
    /// Forecast from saved checkpoints instead of training.
    pub checkpoints: Vec<PathBuf>,
    pub save_checkpoints: bool,
}

impl Default for ForecastSettings {
    fn default() -> Self {
        Self {
            variant: Variant::EncoderDecoder,
            days: 60,
            feedback: Feedback::default(),
            runs: None,
            checkpoints: Vec::new(),
            save_checkpoints: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SummarizeSettings {
    /// Ranking months as `YYYY-MM`; each ranks the cases of the month before.
    /// Empty means every month the data covers.
    pub months: Vec<String>,
    pub top: usize,
    pub weekly: bool,
    /// Regions for the weekly table; every region plus the national total
    /// when empty.
    pub regions: Vec<String>,
}

impl Default for SummarizeSettings {
    fn default() -> Self {
        Self {
            months: Vec::new(),
            top: 10,
            weekly: false,
            regions: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSettings {
    pub epsilon: f64,
    pub threshold: f64,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            threshold: 1e-4,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// File contents when a path is given, defaults otherwise.
    pub fn from_file_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn workers(&self) -> usize {
        self.workers
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, usize::from))
            .max(1)
    }
}

pub fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: seqcast::Error| e.to_string())
}

pub fn parse_split(s: &str) -> Result<SplitKind, String> {
    s.parse().map_err(|e: seqcast::Error| e.to_string())
}

pub fn parse_feedback(s: &str) -> Result<Feedback, String> {
    s.parse().map_err(|e: seqcast::Error| e.to_string())
}

pub fn parse_cell_formula(s: &str) -> Result<CellFormula, String> {
    match s {
        "standard" => Ok(CellFormula::Standard),
        "squashed" => Ok(CellFormula::Squashed),
        _ => Err(format!("unknown cell formula `{s}` (standard | squashed)")),
    }
}

pub fn parse_batch(s: &str) -> Result<BatchMode, String> {
    if s == "full" {
        return Ok(BatchMode::Full);
    }
    match s.parse::<usize>() {
        Ok(k) if k > 0 => Ok(BatchMode::Minibatch(k)),
        _ => Err(format!("batch must be `full` or a positive integer, got `{s}`")),
    }
}
