//! Preprocessing pipeline, per-horizon evaluation, the repeated-training
//! protocol, recursive forecasting and table summaries.

use std::io::Write;

use chrono::{Duration, NaiveDate};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{
    aggregate, build_multivariate, clean_negatives, normalize_with_scale, rolling_mean, DailySeries, NormalizedSeries,
    RegionGroup,
};
use crate::embedding::{random_split_sized, static_split, takens_embed, EmbeddedDataset, EmbeddingConfig};
use crate::error::{Error, Result};
use crate::models::{Model, ModelSpec, Predictor, Variant};
use crate::numerics::{Matrix, Rng};
use crate::training::{train, TrainConfig};

/// Name under which the sum of all regions is exposed when the input file
/// carries no row for it.
pub const NATIONAL: &str = "India";

/// z-score of the two-sided 95% normal interval.
pub const Z95: f64 = 1.96;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizeScope {
    /// Maximum over the whole analysis window.
    #[default]
    Full,
    /// Maximum over the part of the window up to the split boundary.
    Train,
}

/// Date range and preprocessing applied before embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisWindow {
    pub start: NaiveDate,
    pub end: NaiveDate,
    /// Last date whose target block may be used for training in the static
    /// split.
    pub boundary: NaiveDate,
    pub rolling_window: usize,
    pub normalize_scope: NormalizeScope,
}

impl Default for AnalysisWindow {
    fn default() -> Self {
        Self {
            start: NaiveDate::from_ymd_opt(2020, 4, 15).expect("valid date"),
            end: NaiveDate::from_ymd_opt(2021, 9, 27).expect("valid date"),
            boundary: NaiveDate::from_ymd_opt(2021, 5, 15).expect("valid date"),
            rolling_window: 3,
            normalize_scope: NormalizeScope::Full,
        }
    }
}

/// Returns the named region, summing every region for [`NATIONAL`] when the
/// file has no such row.
pub fn resolve_region(series: &[DailySeries], name: &str) -> Result<DailySeries> {
    if let Some(s) = series.iter().find(|s| s.region == name) {
        return Ok(s.clone());
    }
    if name == NATIONAL {
        return aggregate(series, NATIONAL);
    }
    Err(Error::MissingRegion(name.to_string()))
}

/// Regions available as features: everything in the file plus the national
/// aggregate.
pub fn available_regions(series: &[DailySeries]) -> Vec<String> {
    let mut names: Vec<String> = series.iter().map(|s| s.region.clone()).collect();
    if !names.iter().any(|n| n == NATIONAL) {
        names.push(NATIONAL.to_string());
    }
    names.sort();
    names
}

/// Feature group for a target: just the target, or the target with its
/// neighbours. The national multivariate group takes every state.
pub fn region_group(series: &[DailySeries], target: &str, multivariate: bool) -> RegionGroup {
    if !multivariate {
        return RegionGroup::univariate(target);
    }
    let states: Vec<String> = series
        .iter()
        .map(|s| s.region.clone())
        .filter(|r| r != NATIONAL)
        .collect();
    RegionGroup::adjacent(target, &states)
}

/// Preprocessed, embedded data for one target and feature group.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    pub group: RegionGroup,
    pub start_date: NaiveDate,
    /// `time × F` normalised series, target in column 0.
    pub matrix: Matrix,
    /// Normalisation scale of each column.
    pub scales: Vec<f64>,
    pub embedded: EmbeddedDataset,
    pub embedding: EmbeddingConfig,
    pub boundary: NaiveDate,
}

impl PreparedData {
    pub fn target_scale(&self) -> f64 {
        self.scales[0]
    }

    /// Normalised target column.
    pub fn target_series(&self) -> Vec<f64> {
        self.matrix.column(0)
    }

    pub fn end_date(&self) -> NaiveDate {
        self.start_date + Duration::days(self.matrix.rows() as i64 - 1)
    }
}

/// One region through the preprocessing chain: clamp negatives, smooth on
/// the full record, trim to the window and divide by the maximum over the
/// normalisation range.
pub fn preprocess_region(series: &[DailySeries], name: &str, window: &AnalysisWindow) -> Result<NormalizedSeries> {
    if window.boundary < window.start || window.boundary > window.end {
        return Err(Error::OutOfRange(format!(
            "split boundary {} outside analysis window {}..={}",
            window.boundary, window.start, window.end
        )));
    }
    let raw = resolve_region(series, name)?;
    let smoothed = rolling_mean(&clean_negatives(&raw), window.rolling_window)?;
    let trimmed = smoothed.slice(window.start, window.end)?;
    let reference = match window.normalize_scope {
        NormalizeScope::Full => &trimmed.values[..],
        NormalizeScope::Train => {
            let upto = trimmed.index_of(window.boundary).expect("boundary inside window");
            &trimmed.values[..=upto]
        }
    };
    let scale = reference.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(scale > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "{name}: no positive cases in the normalisation range"
        )));
    }
    normalize_with_scale(&trimmed, scale)
}

/// [`preprocess_region`] for every member of `group`, then embedding.
pub fn prepare(
    series: &[DailySeries],
    group: &RegionGroup,
    window: &AnalysisWindow,
    embedding: &EmbeddingConfig,
) -> Result<PreparedData> {
    let normalized = group
        .members()
        .map(|name| preprocess_region(series, name, window))
        .collect::<Result<Vec<_>>>()?;
    let matrix = build_multivariate(group, &normalized)?;
    let embedded = takens_embed(&matrix, window.start, embedding)?;
    Ok(PreparedData {
        group: group.clone(),
        start_date: window.start,
        matrix,
        scales: normalized.iter().map(|n| n.scale).collect(),
        embedded,
        embedding: *embedding,
        boundary: window.boundary,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Static,
    Random,
}

impl SplitKind {
    pub const ALL: [SplitKind; 2] = [SplitKind::Static, SplitKind::Random];

    pub fn label(self) -> &'static str {
        match self {
            SplitKind::Static => "static-split",
            SplitKind::Random => "random-split",
        }
    }
}

impl std::str::FromStr for SplitKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().trim_end_matches("-split").trim_end_matches("_split") {
            "static" => Ok(SplitKind::Static),
            "random" => Ok(SplitKind::Random),
            _ => Err(Error::InvalidArgument(format!("unknown split `{s}`"))),
        }
    }
}

/// Train/test partition of a prepared dataset. The random split takes as
/// many training samples as the static split at the same boundary, drawn
/// with `seed`.
pub fn split_dataset(
    data: &PreparedData,
    kind: SplitKind,
    seed: u64,
) -> Result<(EmbeddedDataset, EmbeddedDataset)> {
    let (train, test) = static_split(&data.embedded, data.boundary)?;
    match kind {
        SplitKind::Static => Ok((train, test)),
        SplitKind::Random => random_split_sized(&data.embedded, train.len(), &mut Rng::new(seed)),
    }
}

pub fn rmse(y: &[f64], yhat: &[f64]) -> Result<f64> {
    if y.len() != yhat.len() {
        return Err(Error::shape("rmse", y.len(), yhat.len()));
    }
    if y.is_empty() {
        return Err(Error::InvalidArgument("rmse of empty vectors".into()));
    }
    let mse = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64;
    Ok(mse.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    /// RMSE per horizon in normalised units.
    pub normalized: Vec<f64>,
    /// RMSE per horizon in cases/day.
    pub denormalized: Vec<f64>,
    pub mean_normalized: f64,
    pub mean_denormalized: f64,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Per-horizon RMSE of `model` over `test`, raw and multiplied by `scale`.
pub fn evaluate(model: &dyn Predictor, test: &EmbeddedDataset, scale: f64) -> Result<HorizonMetrics> {
    if test.is_empty() {
        return Err(Error::EmptyDataset("test set"));
    }
    let h = model.horizons();
    let mut sq = vec![0.0; h];
    for (x, y) in test.inputs.iter().zip(&test.targets) {
        let p = model.predict(x)?;
        if p.len() != h || y.len() != h {
            return Err(Error::shape("evaluate horizons", h, y.len()));
        }
        for k in 0..h {
            sq[k] += (p[k] - y[k]) * (p[k] - y[k]);
        }
    }
    let normalized: Vec<f64> = sq.iter().map(|s| (s / test.len() as f64).sqrt()).collect();
    let denormalized: Vec<f64> = normalized.iter().map(|r| r * scale).collect();
    Ok(HorizonMetrics {
        mean_normalized: mean(&normalized),
        mean_denormalized: mean(&denormalized),
        normalized,
        denormalized,
    })
}

/// Mean, sample standard deviation and 95% half-width `Z95·std/√n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub ci95: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let m = mean(values);
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self {
            mean: m,
            std,
            ci95: Z95 * std / n.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub per_horizon: Vec<Summary>,
    /// Statistics of each run's across-horizon mean.
    pub overall: Summary,
}

impl Aggregate {
    fn from_runs(runs: &[HorizonMetrics], pick: fn(&HorizonMetrics) -> (&[f64], f64)) -> Self {
        let h = pick(&runs[0]).0.len();
        let per_horizon = (0..h)
            .map(|k| Summary::of(&runs.iter().map(|r| pick(r).0[k]).collect::<Vec<_>>()))
            .collect();
        let overall = Summary::of(&runs.iter().map(|r| pick(r).1).collect::<Vec<_>>());
        Self { per_horizon, overall }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub train: HorizonMetrics,
    pub test: HorizonMetrics,
    pub final_train_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub variant: Variant,
    pub dataset: String,
    pub split: SplitKind,
    pub runs: usize,
    pub base_seed: u64,
    pub split_seed: u64,
    pub train_samples: usize,
    pub test_samples: usize,
    pub scale: f64,
    pub model: ModelSpec,
    pub training: TrainConfig,
    pub embedding: EmbeddingConfig,
    pub ci_method: String,
    /// SHA-256 of the case file the data came from, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_sha256: Option<String>,
    pub per_run: Vec<RunResult>,
    /// Aggregates over runs, in cases/day.
    pub test: Aggregate,
    pub train: Aggregate,
    /// The same aggregates in normalised units.
    pub test_normalized: Aggregate,
    pub train_normalized: Aggregate,
}

impl ExperimentReport {
    /// Builds the aggregates from per-run results.
    pub fn from_runs(
        header: ReportHeader,
        per_run: Vec<RunResult>,
    ) -> Result<Self> {
        if per_run.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "at least two runs are needed for an interval, got {}",
                per_run.len()
            )));
        }
        let tests: Vec<HorizonMetrics> = per_run.iter().map(|r| r.test.clone()).collect();
        let trains: Vec<HorizonMetrics> = per_run.iter().map(|r| r.train.clone()).collect();
        fn denorm(m: &HorizonMetrics) -> (&[f64], f64) {
            (&m.denormalized, m.mean_denormalized)
        }
        fn norm(m: &HorizonMetrics) -> (&[f64], f64) {
            (&m.normalized, m.mean_normalized)
        }
        Ok(Self {
            variant: header.model.variant,
            dataset: header.dataset,
            split: header.split,
            runs: per_run.len(),
            base_seed: header.base_seed,
            split_seed: header.split_seed,
            train_samples: header.train_samples,
            test_samples: header.test_samples,
            scale: header.scale,
            model: header.model,
            training: header.training,
            embedding: header.embedding,
            ci_method: format!("normal approximation: {Z95} * sample_std / sqrt(runs)"),
            data_sha256: None,
            test: Aggregate::from_runs(&tests, denorm),
            train: Aggregate::from_runs(&trains, denorm),
            test_normalized: Aggregate::from_runs(&tests, norm),
            train_normalized: Aggregate::from_runs(&trains, norm),
            per_run,
        })
    }
}

/// Everything in a report that is not a per-run result.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportHeader {
    pub dataset: String,
    pub split: SplitKind,
    pub base_seed: u64,
    pub split_seed: u64,
    pub train_samples: usize,
    pub test_samples: usize,
    pub scale: f64,
    pub model: ModelSpec,
    pub training: TrainConfig,
    pub embedding: EmbeddingConfig,
}

/// Trains `runs` models with seeds `cfg.seed + i` on one fixed split and
/// aggregates their errors. Runs execute on up to `workers` threads and are
/// reported in run order.
#[allow(clippy::too_many_arguments)]
pub fn run_protocol(
    spec: &ModelSpec,
    dataset: &str,
    data: &PreparedData,
    split: SplitKind,
    cfg: &TrainConfig,
    runs: usize,
    workers: usize,
) -> Result<ExperimentReport> {
    if runs < 2 {
        return Err(Error::InvalidArgument(format!(
            "at least two runs are needed for an interval, got {runs}"
        )));
    }
    let split_seed = cfg.seed;
    let (train_ds, test_ds) = split_dataset(data, split, split_seed)?;
    if test_ds.is_empty() {
        return Err(Error::EmptyDataset("test set"));
    }
    let scale = data.target_scale();
    let seeds: Vec<u64> = (0..runs as u64).map(|i| cfg.seed.wrapping_add(i)).collect();
    let one = |seed: u64| -> Result<RunResult> {
        let run_cfg = TrainConfig { seed, ..cfg.clone() };
        let out = train(spec, &train_ds, &run_cfg)?;
        Ok(RunResult {
            seed,
            train: evaluate(&out.model, &train_ds, scale)?,
            test: evaluate(&out.model, &test_ds, scale)?,
            final_train_loss: out.history.loss.last().copied(),
        })
    };
    let per_run = run_parallel(&seeds, workers, one)?;
    let mut model = spec.clone();
    model.dropout_rate = cfg.dropout_rate;
    ExperimentReport::from_runs(
        ReportHeader {
            dataset: dataset.to_string(),
            split,
            base_seed: cfg.seed,
            split_seed,
            train_samples: train_ds.len(),
            test_samples: test_ds.len(),
            scale,
            model,
            training: cfg.clone(),
            embedding: data.embedding,
        },
        per_run,
    )
}

/// Maps `f` over `items` on a pool of `workers` threads, keeping order.
pub fn run_parallel<T, R, F>(items: &[T], workers: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(T) -> Result<R> + Sync,
    T: Copy,
{
    if workers <= 1 {
        return items.iter().map(|&t| f(t)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| items.par_iter().map(|&t| f(t)).collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Feedback {
    /// Append every predicted step before predicting again.
    #[default]
    AllSteps,
    /// Append only the first predicted step.
    OneStep,
}

impl std::str::FromStr for Feedback {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all-steps" | "all" | "block" => Ok(Feedback::AllSteps),
            "one-step" | "one" => Ok(Feedback::OneStep),
            _ => Err(Error::InvalidArgument(format!("unknown feedback mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastBand {
    pub dates: Vec<NaiveDate>,
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub runs: usize,
}

impl ForecastBand {
    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["date", "mean", "lower", "upper"])?;
        for i in 0..self.len() {
            out.write_record([
                self.dates[i].to_string(),
                self.mean[i].to_string(),
                self.lower[i].to_string(),
                self.upper[i].to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Extends the normalised `history` by `horizon_days` values with one
/// model: predict, append (negative values clamped to zero), re-window,
/// repeat. Returns normalised values.
pub fn recursive_trajectory(
    model: &dyn Predictor,
    history: &[f64],
    embedding: &EmbeddingConfig,
    horizon_days: usize,
    feedback: Feedback,
) -> Result<Vec<f64>> {
    let (d, f) = model.input_shape();
    if f != 1 {
        return Err(Error::Unsupported(format!(
            "recursive forecasting needs a univariate model; this one reads {f} features whose future values are unknown"
        )));
    }
    if d != embedding.dimension || model.horizons() != embedding.horizons {
        return Err(Error::shape(
            "forecast model",
            format!("window {} / horizons {}", embedding.dimension, embedding.horizons),
            format!("window {d} / horizons {}", model.horizons()),
        ));
    }
    if horizon_days == 0 {
        return Err(Error::InvalidArgument("forecast horizon must be at least one day".into()));
    }
    if history.len() < embedding.span() + 1 {
        return Err(Error::SeriesTooShort {
            required: embedding.span() + 1,
            actual: history.len(),
        });
    }
    let mut series = history.to_vec();
    let mut produced = Vec::with_capacity(horizon_days);
    while produced.len() < horizon_days {
        let newest = series.len() - 1;
        let window: Vec<f64> = (0..d)
            .map(|k| series[newest + k * embedding.stride() - embedding.span()])
            .collect();
        let pred = model.predict(&Matrix::from_vec(d, 1, window)?)?;
        let take = match feedback {
            Feedback::AllSteps => pred.len(),
            Feedback::OneStep => 1,
        };
        for &p in pred.iter().take(take.min(horizon_days - produced.len())) {
            let v = p.max(0.0);
            series.push(v);
            produced.push(v);
        }
    }
    Ok(produced)
}

/// Recursive forecasts of several trained models combined into a band:
/// pointwise mean ± `Z95`·std over models, in cases/day, floored at zero.
/// Dates start the day after `last_date`.
pub fn recursive_forecast(
    models: &[&dyn Predictor],
    history: &[f64],
    embedding: &EmbeddingConfig,
    horizon_days: usize,
    scale: f64,
    last_date: NaiveDate,
    feedback: Feedback,
) -> Result<ForecastBand> {
    if models.is_empty() {
        return Err(Error::InvalidArgument("no models to forecast with".into()));
    }
    let trajectories = models
        .iter()
        .map(|m| {
            Ok(recursive_trajectory(*m, history, embedding, horizon_days, feedback)?
                .into_iter()
                .map(|v| (v * scale).max(0.0))
                .collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut band = ForecastBand {
        dates: (1..=horizon_days as i64).map(|k| last_date + Duration::days(k)).collect(),
        mean: Vec::with_capacity(horizon_days),
        lower: Vec::with_capacity(horizon_days),
        upper: Vec::with_capacity(horizon_days),
        runs: models.len(),
    };
    for i in 0..horizon_days {
        let s = Summary::of(&trajectories.iter().map(|t| t[i]).collect::<Vec<_>>());
        band.mean.push(s.mean);
        band.lower.push((s.mean - Z95 * s.std).max(0.0));
        band.upper.push(s.mean + Z95 * s.std);
    }
    Ok(band)
}

/// Trains `runs` univariate models on every sample of `data` and forecasts
/// `horizon_days` past its last date.
pub fn forecast_with_training(
    spec: &ModelSpec,
    data: &PreparedData,
    cfg: &TrainConfig,
    runs: usize,
    workers: usize,
    horizon_days: usize,
    feedback: Feedback,
) -> Result<(ForecastBand, Vec<Model>)> {
    if runs == 0 {
        return Err(Error::InvalidArgument("need at least one run".into()));
    }
    if spec.input_shape.1 != 1 || data.matrix.cols() != 1 {
        return Err(Error::Unsupported(
            "recursive forecasting is only defined for univariate models".into(),
        ));
    }
    let seeds: Vec<u64> = (0..runs as u64).map(|i| cfg.seed.wrapping_add(i)).collect();
    let models = run_parallel(&seeds, workers, |seed| {
        Ok(train(spec, &data.embedded, &TrainConfig { seed, ..cfg.clone() })?.model)
    })?;
    let refs: Vec<&dyn Predictor> = models.iter().map(|m| m as &dyn Predictor).collect();
    let band = recursive_forecast(
        &refs,
        &data.target_series(),
        &data.embedding,
        horizon_days,
        data.target_scale(),
        data.end_date(),
        feedback,
    )?;
    Ok((band, models))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub model: String,
    pub dataset: String,
    pub split: String,
    pub mean: f64,
    pub std: f64,
}

/// Test RMSE (cases/day) by model, dataset and split.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TableDocument {
    pub rows: Vec<TableRow>,
}

pub fn summarize_tables(reports: &[ExperimentReport]) -> TableDocument {
    TableDocument {
        rows: reports
            .iter()
            .map(|r| TableRow {
                model: r.variant.label().to_string(),
                dataset: r.dataset.clone(),
                split: r.split.label().to_string(),
                mean: r.test.overall.mean,
                std: r.test.overall.std,
            })
            .collect(),
    }
}

impl TableDocument {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for row in &self.rows {
            out.serialize(row)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv writer emits UTF-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let rows = rdr.deserialize().collect::<std::result::Result<Vec<TableRow>, _>>()?;
        Ok(Self { rows })
    }

    /// Fixed-width rendering with means and standard deviations rounded to
    /// whole cases.
    pub fn to_text(&self) -> String {
        let headers = ["model", "dataset", "split", "mean", "std"];
        let cells: Vec<[String; 5]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.model.clone(),
                    r.dataset.clone(),
                    r.split.clone(),
                    format!("{:.0}", r.mean),
                    format!("{:.0}", r.std),
                ]
            })
            .collect();
        let widths: Vec<usize> = (0..5)
            .map(|j| cells.iter().map(|c| c[j].len()).chain([headers[j].len()]).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        let line = |cols: &[&str], out: &mut String| {
            let parts: Vec<String> = cols
                .iter()
                .enumerate()
                .map(|(j, c)| if j >= 3 { format!("{c:>w$}", w = widths[j]) } else { format!("{c:<w$}", w = widths[j]) })
                .collect();
            out.push_str(parts.join("  ").trim_end());
            out.push('\n');
        };
        line(&headers, &mut out);
        for c in &cells {
            line(&c.iter().map(String::as_str).collect::<Vec<_>>(), &mut out);
        }
        out
    }
}

/// Per-horizon test statistics, one row per report and horizon.
pub fn write_horizon_csv<W: Write>(reports: &[ExperimentReport], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["model", "dataset", "split", "horizon", "mean", "std", "ci95"])?;
    for r in reports {
        for (k, s) in r.test.per_horizon.iter().enumerate() {
            out.write_record([
                r.variant.label().to_string(),
                r.dataset.clone(),
                r.split.label().to_string(),
                (k + 1).to_string(),
                s.mean.to_string(),
                s.std.to_string(),
                s.ci95.to_string(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Train and test RMSE summaries side by side.
pub fn write_train_test_csv<W: Write>(reports: &[ExperimentReport], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["model", "dataset", "split", "set", "mean", "std", "ci95"])?;
    for r in reports {
        for (set, agg) in [("train", &r.train), ("test", &r.test)] {
            out.write_record([
                r.variant.label().to_string(),
                r.dataset.clone(),
                r.split.label().to_string(),
                set.to_string(),
                agg.overall.mean.to_string(),
                agg.overall.std.to_string(),
                agg.overall.ci95.to_string(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelParams;

    struct Constant(Vec<f64>, usize);

    impl Predictor for Constant {
        fn input_shape(&self) -> (usize, usize) {
            (self.1, 1)
        }
        fn horizons(&self) -> usize {
            self.0.len()
        }
        fn predict(&self, _: &Matrix) -> Result<Vec<f64>> {
            Ok(self.0.clone())
        }
    }

    /// Predicts `a` times the newest window value for every horizon step,
    /// compounding: step k is `a^k · x`.
    struct Geometric(f64, usize, usize);

    impl Predictor for Geometric {
        fn input_shape(&self) -> (usize, usize) {
            (self.1, 1)
        }
        fn horizons(&self) -> usize {
            self.2
        }
        fn predict(&self, w: &Matrix) -> Result<Vec<f64>> {
            let last = w.get(w.rows() - 1, 0);
            Ok((1..=self.2).map(|k| self.0.powi(k as i32) * last).collect())
        }
    }

    /// Returns the targets it was built with, looked up by window.
    struct Oracle(EmbeddedDataset);

    impl Predictor for Oracle {
        fn input_shape(&self) -> (usize, usize) {
            self.0.window_shape().unwrap()
        }
        fn horizons(&self) -> usize {
            self.0.horizons().unwrap()
        }
        fn predict(&self, w: &Matrix) -> Result<Vec<f64>> {
            let i = self.0.inputs.iter().position(|x| x == w).unwrap();
            Ok(self.0.targets[i].clone())
        }
    }

    fn d(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    fn random_dataset(rng: &mut Rng, n: usize) -> EmbeddedDataset {
        let m = Matrix::from_vec(n, 1, (0..n).map(|_| rng.next_f64()).collect()).unwrap();
        takens_embed(&m, d("2021-01-01"), &EmbeddingConfig::default()).unwrap()
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 3.5355339059327378).abs() < 1e-15);
        let (a, b) = ([0.3, -1.0, 2.5], [1.0, 0.2, 2.0]);
        let mse = crate::training::mse_loss(&a, &b).unwrap();
        assert_eq!(rmse(&a, &b).unwrap(), mse.sqrt());
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn evaluate_oracles() {
        let mut rng = Rng::new(3);
        let ds = random_dataset(&mut rng, 40);
        let perfect = evaluate(&Oracle(ds.clone()), &ds, 100.0).unwrap();
        assert!(perfect.normalized.iter().all(|&r| r == 0.0));

        let zero = evaluate(&Constant(vec![0.0; 4], 6), &ds, 10.0).unwrap();
        for k in 0..4 {
            let col_rms = (ds.targets.iter().map(|t| t[k] * t[k]).sum::<f64>() / ds.len() as f64).sqrt();
            assert!((zero.normalized[k] - col_rms).abs() < 1e-12);
            assert!((zero.denormalized[k] - 10.0 * col_rms).abs() < 1e-12);
        }
        assert!((zero.mean_normalized - zero.normalized.iter().sum::<f64>() / 4.0).abs() < 1e-15);

        let spec = ModelSpec::univariate(Variant::Plain, 6, 4);
        let model = Model::new(spec.clone(), ModelParams::init(&spec, &mut rng).unwrap()).unwrap();
        let got = evaluate(&model, &ds, 1.0).unwrap();
        for k in 0..4 {
            let (y, yhat): (Vec<f64>, Vec<f64>) = ds
                .inputs
                .iter()
                .zip(&ds.targets)
                .map(|(x, t)| (t[k], model.predict(x).unwrap()[k]))
                .unzip();
            assert!((got.normalized[k] - rmse(&y, &yhat).unwrap()).abs() < 1e-12);
        }
        assert!(evaluate(&model, &ds.select(&[]), 1.0).is_err());
    }

    #[test]
    fn summary_and_aggregate() {
        let s = Summary::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        let std = (5.0f64 / 3.0).sqrt();
        assert!((s.std - std).abs() < 1e-15);
        assert!((s.ci95 - 1.96 * std / 2.0).abs() < 1e-15);
        assert_eq!(Summary::of(&[7.0, 7.0, 7.0]).ci95, 0.0);
        let a = Summary::of(&[3.0, 1.0, 4.0, 1.0, 5.0]);
        let b = Summary::of(&[5.0, 1.0, 4.0, 3.0, 1.0]);
        assert!((a.mean - b.mean).abs() < 1e-15 && (a.std - b.std).abs() < 1e-15);
    }

    #[test]
    fn recursive_constant_and_single_band() {
        let emb = EmbeddingConfig::default();
        let history = vec![0.5; 20];
        let m = Constant(vec![0.25; 4], 6);
        let band = recursive_forecast(&[&m], &history, &emb, 60, 1000.0, d("2021-09-27"), Feedback::AllSteps).unwrap();
        assert_eq!(band.len(), 60);
        assert!(band.mean.iter().all(|&v| v == 250.0));
        assert_eq!(band.lower, band.mean);
        assert_eq!(band.upper, band.mean);
        assert_eq!(band.dates[0], d("2021-09-28"));
        assert_eq!(band.dates[59], d("2021-11-26"));
    }

    #[test]
    fn recursive_geometric_closed_form() {
        let emb = EmbeddingConfig::default();
        let history: Vec<f64> = (0..15).map(|i| 0.1 + i as f64 * 0.01).collect();
        let x0 = *history.last().unwrap();
        let a = 0.97;
        for feedback in [Feedback::AllSteps, Feedback::OneStep] {
            let traj = recursive_trajectory(&Geometric(a, 6, 4), &history, &emb, 11, feedback).unwrap();
            for (k, v) in traj.iter().enumerate() {
                let want = a.powi(k as i32 + 1) * x0;
                assert!((v - want).abs() < 1e-14, "{feedback:?} step {k}: {v} vs {want}");
            }
        }
    }

    #[test]
    fn recursive_truncates_and_clamps() {
        let emb = EmbeddingConfig::default();
        let m = Constant(vec![-0.5, 0.2, 0.3, 0.4], 6);
        let traj = recursive_trajectory(&m, &[0.5; 11], &emb, 6, Feedback::AllSteps).unwrap();
        assert_eq!(traj, vec![0.0, 0.2, 0.3, 0.4, 0.0, 0.2]);
        let band = recursive_forecast(&[&m, &Constant(vec![0.1; 4], 6)], &[0.5; 11], &emb, 1, 10.0, d("2021-01-01"), Feedback::AllSteps).unwrap();
        assert_eq!(band.len(), 1);
        assert!(band.lower[0] >= 0.0 && band.lower[0] <= band.mean[0] && band.mean[0] <= band.upper[0]);
    }

    #[test]
    fn recursive_rejects_multivariate_and_bad_args() {
        let emb = EmbeddingConfig::default();
        struct Multi;
        impl Predictor for Multi {
            fn input_shape(&self) -> (usize, usize) {
                (6, 4)
            }
            fn horizons(&self) -> usize {
                4
            }
            fn predict(&self, _: &Matrix) -> Result<Vec<f64>> {
                Ok(vec![0.0; 4])
            }
        }
        let err = recursive_trajectory(&Multi, &[0.5; 20], &emb, 5, Feedback::AllSteps).unwrap_err();
        assert!(matches!(err, Error::Unsupported(_)));
        let c = Constant(vec![0.1; 4], 6);
        assert!(recursive_trajectory(&c, &[0.5; 20], &emb, 0, Feedback::AllSteps).is_err());
        assert!(recursive_trajectory(&c, &[0.5; 10], &emb, 5, Feedback::AllSteps).is_err());
    }

    fn synthetic_series() -> Vec<DailySeries> {
        let start = d("2020-03-01");
        let n = 600;
        let mk = |name: &str, amp: f64, phase: f64| {
            let values = (0..n)
                .map(|t| (amp * (1.0 + (t as f64 / 40.0 + phase).sin())).round())
                .collect();
            DailySeries::new(name, start, values).unwrap()
        };
        vec![mk("Delhi", 100.0, 0.0), mk("Haryana", 50.0, 1.0), mk("Rajasthan", 70.0, 2.0), mk("Uttar Pradesh", 90.0, 3.0)]
    }

    #[test]
    fn prepare_pipeline_and_splits() {
        let series = synthetic_series();
        let window = AnalysisWindow::default();
        let emb = EmbeddingConfig::default();
        let data = prepare(&series, &RegionGroup::univariate("India"), &window, &emb).unwrap();
        assert_eq!(data.matrix.rows(), 531);
        assert_eq!(data.embedded.len(), 531 - 10 - 4);
        let col = data.target_series();
        assert_eq!(col.iter().copied().fold(f64::MIN, f64::max), 1.0);

        // Oracle: sum, smooth, trim, divide by max.
        let total = aggregate(&series, "India").unwrap();
        let smooth = rolling_mean(&total, 3).unwrap().slice(window.start, window.end).unwrap();
        let max = smooth.values.iter().copied().fold(f64::MIN, f64::max);
        for (a, b) in col.iter().zip(&smooth.values) {
            assert!((a - b / max).abs() < 1e-15);
        }

        let (train, test) = split_dataset(&data, SplitKind::Static, 0).unwrap();
        assert_eq!(train.len(), 385);
        assert_eq!(*train.anchor_dates.last().unwrap(), d("2021-05-14"));
        assert_eq!(test.anchor_dates[0], d("2021-05-15"));
        let (rtrain, rtest) = split_dataset(&data, SplitKind::Random, 7).unwrap();
        assert_eq!((rtrain.len(), rtest.len()), (train.len(), test.len()));

        let group = region_group(&series, "Delhi", true);
        let multi = prepare(&series, &group, &window, &emb).unwrap();
        assert_eq!(multi.matrix.cols(), 4);
        assert_eq!(multi.embedded.window_shape(), Some((6, 4)));

        let train_scope = AnalysisWindow {
            normalize_scope: NormalizeScope::Train,
            ..window.clone()
        };
        let scoped = prepare(&series, &RegionGroup::univariate("Delhi"), &train_scope, &emb).unwrap();
        let upto = (window.boundary - window.start).num_days() as usize;
        let col = scoped.target_series();
        assert_eq!(col[..=upto].iter().copied().fold(f64::MIN, f64::max), 1.0);

        assert!(prepare(&series, &RegionGroup::univariate("Goa"), &window, &emb).is_err());
    }

    #[test]
    fn protocol_aggregates_and_determinism() {
        let series = synthetic_series();
        let window = AnalysisWindow::default();
        let emb = EmbeddingConfig::default();
        let data = prepare(&series, &RegionGroup::univariate("Delhi"), &window, &emb).unwrap();
        let spec = ModelSpec::univariate(Variant::EncoderDecoder, 6, 4);
        let cfg = TrainConfig {
            epochs: 1,
            seed: 11,
            ..TrainConfig::for_variant(Variant::EncoderDecoder)
        };
        let r = run_protocol(&spec, "Delhi", &data, SplitKind::Random, &cfg, 3, 1).unwrap();
        assert_eq!(r.runs, 3);
        assert_eq!(r.per_run.iter().map(|x| x.seed).collect::<Vec<_>>(), vec![11, 12, 13]);
        let means: Vec<f64> = r.per_run.iter().map(|x| x.test.mean_denormalized).collect();
        assert!((r.test.overall.mean - means.iter().sum::<f64>() / 3.0).abs() < 1e-12);
        assert!((r.test.overall.ci95 - 1.96 * r.test.overall.std / 3f64.sqrt()).abs() < 1e-12);
        let again = run_protocol(&spec, "Delhi", &data, SplitKind::Random, &cfg, 3, 2).unwrap();
        assert_eq!(r, again);
        assert!(run_protocol(&spec, "Delhi", &data, SplitKind::Random, &cfg, 1, 1).is_err());

        // Identical per-run inputs collapse the interval.
        let same: Vec<RunResult> = (0..4).map(|_| r.per_run[0].clone()).collect();
        let header = ReportHeader {
            dataset: "Delhi".into(),
            split: SplitKind::Random,
            base_seed: 0,
            split_seed: 0,
            train_samples: 1,
            test_samples: 1,
            scale: 1.0,
            model: spec.clone(),
            training: cfg.clone(),
            embedding: emb,
        };
        let flat = ExperimentReport::from_runs(header, same).unwrap();
        assert_eq!(flat.test.overall.std, 0.0);
        assert_eq!(flat.test.overall.ci95, 0.0);
    }

    #[test]
    fn tables_render_and_round_trip() {
        let series = synthetic_series();
        let data = prepare(&series, &RegionGroup::univariate("Delhi"), &AnalysisWindow::default(), &EmbeddingConfig::default()).unwrap();
        let spec = ModelSpec::univariate(Variant::Plain, 6, 4);
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let r = run_protocol(&spec, "Delhi", &data, SplitKind::Static, &cfg, 2, 1).unwrap();
        let doc = summarize_tables(std::slice::from_ref(&r));
        assert_eq!(doc.rows.len(), 1);
        let back = TableDocument::from_csv(&doc.to_csv().unwrap()).unwrap();
        for (a, b) in doc.rows.iter().zip(&back.rows) {
            assert!(((a.mean - b.mean) / a.mean).abs() < 1e-6);
            assert_eq!((&a.model, &a.dataset, &a.split), (&b.model, &b.dataset, &b.split));
        }
        let text = doc.to_text();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with("model"));
        let mut buf = Vec::new();
        write_horizon_csv(std::slice::from_ref(&r), &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 5);
    }
}
