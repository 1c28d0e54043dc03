//! The JSON cache written by `ingest` and read by `experiment`/`forecast`.

use std::path::Path;

use anyhow::{bail, Context, Result};
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use seqcast::dataio::{load_csv, DailySeries, LoadOptions};
use seqcast::experiment::{available_regions, preprocess_region, AnalysisWindow};

pub const CACHE_FORMAT: u32 = 1;

/// One region after cleaning, smoothing, trimming and normalisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedRegion {
    pub region: String,
    pub start_date: NaiveDate,
    pub scale: f64,
    pub smoothed: Vec<f64>,
    pub normalized: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestCache {
    pub format: u32,
    pub source: String,
    pub sha256: String,
    pub cumulative: bool,
    pub window: AnalysisWindow,
    /// Daily series as loaded, for re-running the pipeline with other
    /// settings.
    pub raw: Vec<DailySeries>,
    pub regions: Vec<CachedRegion>,
}

impl IngestCache {
    /// Runs the preprocessing chain on every region of `raw` plus the
    /// national aggregate.
    pub fn build(source: &str, sha256: &str, cumulative: bool, window: &AnalysisWindow, raw: Vec<DailySeries>) -> Result<Self> {
        let regions = available_regions(&raw)
            .iter()
            .map(|name| {
                let n = preprocess_region(&raw, name, window).with_context(|| format!("preprocessing {name}"))?;
                Ok(CachedRegion {
                    region: name.clone(),
                    start_date: n.base.start_date,
                    scale: n.scale,
                    smoothed: n.base.values,
                    normalized: n.normalized,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            format: CACHE_FORMAT,
            source: source.to_string(),
            sha256: sha256.to_string(),
            cumulative,
            window: window.clone(),
            raw,
            regions,
        })
    }

    pub fn from_csv(path: &Path, sha256: &str, cumulative: bool, window: &AnalysisWindow) -> Result<Self> {
        let raw = load_csv(path, LoadOptions { cumulative }).with_context(|| format!("loading {}", path.display()))?;
        Self::build(&path.display().to_string(), sha256, cumulative, window, raw)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading cache {}", path.display()))?;
        let cache: Self = serde_json::from_str(&text).with_context(|| format!("parsing cache {}", path.display()))?;
        if cache.format != CACHE_FORMAT {
            bail!("cache {} has format {}, expected {CACHE_FORMAT}", path.display(), cache.format);
        }
        Ok(cache)
    }
}
