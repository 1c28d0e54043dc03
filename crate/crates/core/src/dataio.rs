//! Case-count ingestion, smoothing, normalisation, and the descriptive
//! summaries (monthly rankings, weekly averages).
//!
//! Input files are UTF-8 CSV with the header `date,region,new_cases`.
//! Rows may come in any order; the loader groups them by region and
//! checks that every region covers a contiguous run of calendar days.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use chrono::{Datelike, Duration, Months, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Daily new-case counts for one region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailySeries {
    pub region: String,
    pub start_date: NaiveDate,
    pub values: Vec<f64>,
}

impl DailySeries {
    pub fn new(region: impl Into<String>, start_date: NaiveDate, values: Vec<f64>) -> Result<Self> {
        let region = region.into();
        if values.is_empty() {
            return Err(Error::InvalidArgument(format!("series for {region} is empty")));
        }
        Ok(Self {
            region,
            start_date,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn end_date(&self) -> NaiveDate {
        self.date_at(self.values.len() - 1)
    }

    pub fn date_at(&self, index: usize) -> NaiveDate {
        self.start_date + Duration::days(index as i64)
    }

    pub fn index_of(&self, date: NaiveDate) -> Option<usize> {
        let offset = (date - self.start_date).num_days();
        (offset >= 0 && (offset as usize) < self.values.len()).then_some(offset as usize)
    }

    /// Inclusive date window `[from, to]`.
    pub fn slice(&self, from: NaiveDate, to: NaiveDate) -> Result<Self> {
        let (Some(a), Some(b)) = (self.index_of(from), self.index_of(to)) else {
            return Err(Error::OutOfRange(format!(
                "{}: window {from}..={to} outside data range {}..={}",
                self.region,
                self.start_date,
                self.end_date()
            )));
        };
        if a > b {
            return Err(Error::InvalidArgument(format!("window start {from} after end {to}")));
        }
        Self::new(self.region.clone(), from, self.values[a..=b].to_vec())
    }
}

/// A series divided by a recorded scale (the maximum by default).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedSeries {
    pub base: DailySeries,
    pub scale: f64,
    pub normalized: Vec<f64>,
}

impl NormalizedSeries {
    pub fn region(&self) -> &str {
        &self.base.region
    }

    pub fn denormalize(&self) -> DailySeries {
        DailySeries {
            region: self.base.region.clone(),
            start_date: self.base.start_date,
            values: self.normalized.iter().map(|v| v * self.scale).collect(),
        }
    }
}

/// Forecast target followed by the regions whose series join it as features.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionGroup {
    pub target: String,
    pub neighbors: Vec<String>,
}

impl RegionGroup {
    pub fn univariate(target: impl Into<String>) -> Self {
        Self {
            target: target.into(),
            neighbors: Vec::new(),
        }
    }

    pub fn members(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.target.as_str()).chain(self.neighbors.iter().map(String::as_str))
    }

    pub fn feature_count(&self) -> usize {
        1 + self.neighbors.len()
    }

    /// Neighbour groups used for the multivariate experiments. A target
    /// without a listed group is treated as the national aggregate: every
    /// other available region joins as a feature, alphabetically.
    pub fn adjacent(target: &str, available: &[String]) -> Self {
        let neighbors: Vec<&str> = match target {
            "Maharashtra" => vec!["Gujarat", "Madhya Pradesh", "Uttar Pradesh"],
            "Delhi" => vec!["Rajasthan", "Uttar Pradesh", "Haryana"],
            _ => {
                let mut all: Vec<&str> = available
                    .iter()
                    .map(String::as_str)
                    .filter(|r| *r != target)
                    .collect();
                all.sort_unstable();
                all
            }
        };
        Self {
            target: target.to_string(),
            neighbors: neighbors.into_iter().map(str::to_string).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadOptions {
    /// The `new_cases` column holds running totals; difference them.
    pub cumulative: bool,
}

pub fn load_csv(path: impl AsRef<Path>, opts: LoadOptions) -> Result<Vec<DailySeries>> {
    let file = std::fs::File::open(path.as_ref())?;
    read_csv(file, opts)
}

/// Parses `date,region,new_cases` rows into one series per region, sorted
/// by region name.
pub fn read_csv<R: Read>(reader: R, opts: LoadOptions) -> Result<Vec<DailySeries>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let headers = rdr.headers()?.clone();
    let expected = ["date", "region", "new_cases"];
    if headers.len() != 3 || headers.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(Error::MalformedRow {
            line: 1,
            message: format!(
                "header must be `date,region,new_cases`, found `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }

    let mut by_region: BTreeMap<String, BTreeMap<NaiveDate, (i64, u64)>> = BTreeMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::MalformedRow {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |message: String| Error::MalformedRow { line, message };
        if record.len() != 3 {
            return Err(bad(format!("expected 3 fields, found {}", record.len())));
        }
        let date = NaiveDate::parse_from_str(&record[0], "%Y-%m-%d")
            .map_err(|e| bad(format!("bad date `{}`: {e}", &record[0])))?;
        let region = record[1].to_string();
        if region.is_empty() {
            return Err(bad("empty region".into()));
        }
        let count: i64 = record[2]
            .parse()
            .map_err(|_| bad(format!("new_cases `{}` is not an integer", &record[2])))?;
        let days = by_region.entry(region.clone()).or_default();
        if let Some(&(_, first)) = days.get(&date) {
            return Err(Error::DuplicateRow {
                region,
                date,
                line: line.max(first),
            });
        }
        days.insert(date, (count, line));
    }

    if by_region.is_empty() {
        return Err(Error::EmptyDataset("csv contains no data rows"));
    }

    by_region
        .into_iter()
        .map(|(region, days)| {
            let start = *days.keys().next().expect("non-empty");
            let mut expected = start;
            let mut raw = Vec::with_capacity(days.len());
            for (date, (count, _)) in days {
                if date != expected {
                    return Err(Error::DateGap {
                        region,
                        missing: expected,
                    });
                }
                raw.push(count);
                expected = date + Duration::days(1);
            }
            let values = if opts.cumulative {
                let mut prev = 0i64;
                raw.into_iter()
                    .map(|c| {
                        let d = c - prev;
                        prev = c;
                        d as f64
                    })
                    .collect()
            } else {
                raw.into_iter().map(|c| c as f64).collect()
            };
            DailySeries::new(region, start, values)
        })
        .collect()
}

pub fn clean_negatives(s: &DailySeries) -> DailySeries {
    DailySeries {
        values: s.values.iter().map(|&v| if v < 0.0 { 0.0 } else { v }).collect(),
        ..s.clone()
    }
}

/// Trailing mean over `window` days; the first `window - 1` outputs average
/// the available prefix.
pub fn rolling_mean(s: &DailySeries, window: usize) -> Result<DailySeries> {
    if window == 0 {
        return Err(Error::InvalidArgument("rolling window must be at least 1".into()));
    }
    let values = (0..s.values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            let block = &s.values[lo..=i];
            block.iter().sum::<f64>() / block.len() as f64
        })
        .collect();
    Ok(DailySeries {
        values,
        ..s.clone()
    })
}

pub fn normalize_max(s: &DailySeries) -> Result<NormalizedSeries> {
    let max = s.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "{}: cannot normalise a series whose maximum is {max}",
            s.region
        )));
    }
    normalize_with_scale(s, max)
}

pub fn normalize_with_scale(s: &DailySeries, scale: f64) -> Result<NormalizedSeries> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::InvalidArgument(format!("scale must be positive, got {scale}")));
    }
    Ok(NormalizedSeries {
        normalized: s.values.iter().map(|v| v / scale).collect(),
        base: s.clone(),
        scale,
    })
}

/// Stacks the group's normalised series into a `time × F` matrix, target
/// in column 0.
pub fn build_multivariate(group: &RegionGroup, series: &[NormalizedSeries]) -> Result<Matrix> {
    let columns = group
        .members()
        .map(|name| {
            series
                .iter()
                .find(|s| s.region() == name)
                .ok_or_else(|| Error::MissingRegion(name.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let target = columns[0];
    let n = target.normalized.len();
    for c in &columns[1..] {
        if c.normalized.len() != n {
            return Err(Error::LengthMismatch {
                region: c.region().to_string(),
                expected: n,
                found: c.normalized.len(),
            });
        }
        if c.base.start_date != target.base.start_date {
            return Err(Error::InvalidArgument(format!(
                "region {} starts {} but target starts {}",
                c.region(),
                c.base.start_date,
                target.base.start_date
            )));
        }
    }
    let f = columns.len();
    let mut data = Vec::with_capacity(n * f);
    for t in 0..n {
        data.extend(columns.iter().map(|c| c.normalized[t]));
    }
    Matrix::from_vec(n, f, data)
}

/// Elementwise sum of regions sharing one date range, e.g. a national total.
pub fn aggregate(series: &[DailySeries], name: &str) -> Result<DailySeries> {
    let first = series
        .first()
        .ok_or(Error::EmptyDataset("no series to aggregate"))?;
    let mut values = vec![0.0; first.len()];
    for s in series {
        if s.start_date != first.start_date || s.len() != first.len() {
            return Err(Error::LengthMismatch {
                region: s.region.clone(),
                expected: first.len(),
                found: s.len(),
            });
        }
        for (acc, v) in values.iter_mut().zip(&s.values) {
            *acc += v;
        }
    }
    DailySeries::new(name, first.start_date, values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub rank: usize,
    pub region: String,
    pub total: f64,
}

/// Regions ordered by new cases summed over the calendar month ending the
/// day before `month_start`. Ties are broken alphabetically.
pub fn monthly_rank(
    series: &[DailySeries],
    month_start: NaiveDate,
    top_k: usize,
) -> Result<Vec<RankEntry>> {
    if top_k == 0 {
        return Err(Error::InvalidArgument("top_k must be at least 1".into()));
    }
    if month_start.day() != 1 {
        return Err(Error::InvalidArgument(format!(
            "{month_start} is not the first day of a month"
        )));
    }
    let from = month_start - Months::new(1);
    let to = month_start - Duration::days(1);
    let mut totals = series
        .iter()
        .map(|s| match (s.index_of(from), s.index_of(to)) {
            (Some(a), Some(b)) => Ok((s.region.clone(), s.values[a..=b].iter().sum::<f64>())),
            _ => Err(Error::OutOfRange(format!(
                "month {from}..={to} not covered by {} ({}..={})",
                s.region,
                s.start_date,
                s.end_date()
            ))),
        })
        .collect::<Result<Vec<_>>>()?;
    totals.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(totals
        .into_iter()
        .take(top_k)
        .enumerate()
        .map(|(i, (region, total))| RankEntry {
            rank: i + 1,
            region,
            total,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeeklyMean {
    pub week_start: NaiveDate,
    pub mean: f64,
}

/// Means of consecutive 7-day blocks from the series start; a trailing
/// partial week is dropped.
pub fn weekly_average(s: &DailySeries) -> Result<Vec<WeeklyMean>> {
    if s.len() < 7 {
        return Err(Error::SeriesTooShort {
            required: 7,
            actual: s.len(),
        });
    }
    Ok(s.values
        .chunks_exact(7)
        .enumerate()
        .map(|(w, block)| WeeklyMean {
            week_start: s.date_at(w * 7),
            mean: block.iter().sum::<f64>() / 7.0,
        })
        .collect())
}
