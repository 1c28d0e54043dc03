//! Delay-embedding of a `time × F` series into supervised windows, and the
//! two train/test protocols (chronological and shuffled).

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingConfig {
    /// Points per input window.
    pub dimension: usize,
    /// Spacing between window points (ignored in contiguous mode).
    pub time_lag: usize,
    /// Jointly predicted future steps.
    pub horizons: usize,
    /// Use `dimension` consecutive points instead of lagged ones.
    pub contiguous: bool,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            dimension: 6,
            time_lag: 2,
            horizons: 4,
            contiguous: false,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dimension == 0 || self.time_lag == 0 || self.horizons == 0 {
            return Err(Error::InvalidArgument(format!(
                "embedding dimension, lag and horizons must be >= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Step between consecutive window elements.
    pub fn stride(&self) -> usize {
        if self.contiguous {
            1
        } else {
            self.time_lag
        }
    }

    /// Distance from the oldest to the newest element of a window.
    pub fn span(&self) -> usize {
        (self.dimension - 1) * self.stride()
    }

    pub fn sample_count(&self, series_len: usize) -> usize {
        series_len.saturating_sub(self.span() + self.horizons)
    }

    pub fn min_series_len(&self) -> usize {
        self.span() + self.horizons + 1
    }

    /// Window (oldest first) ending at `newest` of a `time × F` series.
    pub fn window_at(&self, series: &Matrix, newest: usize) -> Result<Matrix> {
        let f = series.cols();
        let mut data = Vec::with_capacity(self.dimension * f);
        for k in 0..self.dimension {
            let t = newest + k * self.stride() - self.span();
            data.extend_from_slice(series.row(t));
        }
        Matrix::from_vec(self.dimension, f, data)
    }
}

/// Windows of shape `D × F` (oldest row first) with the `horizons` values of
/// feature 0 that follow each window's newest row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedDataset {
    pub inputs: Vec<Matrix>,
    pub targets: Vec<Vec<f64>>,
    /// Date of each window's newest row.
    pub anchor_dates: Vec<NaiveDate>,
    /// Position of each sample in the unsplit dataset.
    pub origin: Vec<usize>,
}

impl EmbeddedDataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn window_shape(&self) -> Option<(usize, usize)> {
        self.inputs.first().map(Matrix::shape)
    }

    pub fn horizons(&self) -> Option<usize> {
        self.targets.first().map(Vec::len)
    }

    /// Subset by position, keeping the given order.
    pub fn select(&self, positions: &[usize]) -> Self {
        Self {
            inputs: positions.iter().map(|&i| self.inputs[i].clone()).collect(),
            targets: positions.iter().map(|&i| self.targets[i].clone()).collect(),
            anchor_dates: positions.iter().map(|&i| self.anchor_dates[i]).collect(),
            origin: positions.iter().map(|&i| self.origin[i]).collect(),
        }
    }
}

pub fn takens_embed(series: &Matrix, start_date: NaiveDate, cfg: &EmbeddingConfig) -> Result<EmbeddedDataset> {
    cfg.validate()?;
    let n = series.rows();
    if n < cfg.min_series_len() {
        return Err(Error::SeriesTooShort {
            required: cfg.min_series_len(),
            actual: n,
        });
    }
    let count = cfg.sample_count(n);
    let mut ds = EmbeddedDataset {
        inputs: Vec::with_capacity(count),
        targets: Vec::with_capacity(count),
        anchor_dates: Vec::with_capacity(count),
        origin: Vec::with_capacity(count),
    };
    for (k, newest) in (cfg.span()..cfg.span() + count).enumerate() {
        ds.inputs.push(cfg.window_at(series, newest)?);
        ds.targets
            .push((1..=cfg.horizons).map(|h| series.get(newest + h, 0)).collect());
        ds.anchor_dates.push(start_date + Duration::days(newest as i64));
        ds.origin.push(k);
    }
    Ok(ds)
}

/// Chronological split: a sample trains when its target block starts on or
/// before `boundary`.
pub fn static_split(ds: &EmbeddedDataset, boundary: NaiveDate) -> Result<(EmbeddedDataset, EmbeddedDataset)> {
    let first = *ds
        .anchor_dates
        .first()
        .ok_or(Error::EmptyDataset("static split of an empty dataset"))?;
    if boundary < first {
        return Err(Error::OutOfRange(format!(
            "split boundary {boundary} precedes the first window date {first}"
        )));
    }
    let (train, test): (Vec<usize>, Vec<usize>) =
        (0..ds.len()).partition(|&i| ds.anchor_dates[i] + Duration::days(1) <= boundary);
    Ok((ds.select(&train), ds.select(&test)))
}

/// Shuffled split: the first `⌊n · train_fraction⌋` indices of a seeded
/// permutation train, the rest test. Both parts keep dataset order.
pub fn random_split(
    ds: &EmbeddedDataset,
    train_fraction: f64,
    rng: &mut Rng,
) -> Result<(EmbeddedDataset, EmbeddedDataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let train_len = (ds.len() as f64 * train_fraction).floor() as usize;
    random_split_sized(ds, train_len, rng)
}

/// Shuffled split with an exact training size.
pub fn random_split_sized(
    ds: &EmbeddedDataset,
    train_len: usize,
    rng: &mut Rng,
) -> Result<(EmbeddedDataset, EmbeddedDataset)> {
    if train_len > ds.len() {
        return Err(Error::InvalidArgument(format!(
            "training size {train_len} exceeds dataset size {}",
            ds.len()
        )));
    }
    let perm = rng.permutation(ds.len());
    let mut train = perm[..train_len].to_vec();
    let mut test = perm[train_len..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((ds.select(&train), ds.select(&test)))
}
