//! Subcommand implementations. Each takes a fully resolved [`RunConfig`] and
//! an open [`RunDir`].

use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{anyhow, bail, ensure, Context, Result};
use chrono::{Datelike, Months, NaiveDate};
use serde::Serialize;
use serde_json::json;

use seqcast::checkpoint::Checkpoint;
use seqcast::dataio::{load_csv, monthly_rank, weekly_average, LoadOptions};
use seqcast::experiment::{
    available_regions, forecast_with_training, prepare, recursive_forecast, region_group, resolve_region,
    run_protocol, summarize_tables, write_horizon_csv, write_train_test_csv, ExperimentReport, NATIONAL,
};
use seqcast::training::{gradient_check_perturbed, tiny_spec};
use seqcast::{ModelSpec, Predictor, Variant};

use crate::cache::IngestCache;
use crate::config::RunConfig;
use crate::rundir::RunDir;

fn data_path(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.data
        .clone()
        .ok_or_else(|| anyhow!("no case file given; pass --data <csv> or set `data` in the config"))
}

fn load_cache(cfg: &RunConfig, out: &mut RunDir) -> Result<IngestCache> {
    let path = cfg
        .cache
        .clone()
        .ok_or_else(|| anyhow!("no ingest cache given; run `seqcast ingest` first and pass --cache <cache.json>"))?;
    ensure!(path.exists(), "ingest cache {} does not exist; run `seqcast ingest` first", path.display());
    out.add_input(&path)?;
    IngestCache::load(&path)
}

/// Lowercase, dash-separated form of a label for file names.
fn slug(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
        .collect::<String>()
        .split('-')
        .filter(|p| !p.is_empty())
        .collect::<Vec<_>>()
        .join("-")
}

pub fn ingest(cfg: &RunConfig, out: &mut RunDir) -> Result<()> {
    let path = data_path(cfg)?;
    let sha = out.add_input(&path)?;
    let cache = IngestCache::from_csv(&path, &sha, cfg.cumulative, &cfg.window)?;
    let written = out.write_json("cache.json", &cache)?;

    println!("{:<42} {:>6} {:>12} {:>12}", "region", "days", "total", "scale");
    for (region, raw) in cache.regions.iter().map(|r| (r, resolve_region(&cache.raw, &r.region))) {
        let raw = raw?;
        println!(
            "{:<42} {:>6} {:>12.0} {:>12.1}",
            region.region,
            raw.len(),
            raw.values.iter().sum::<f64>(),
            region.scale
        );
    }
    println!("cache: {}", written.display());
    Ok(())
}

fn model_spec(cfg: &RunConfig, variant: Variant, features: usize) -> ModelSpec {
    let emb = &cfg.embedding;
    let mut spec = if cfg.multivariate {
        ModelSpec::multivariate(variant, emb.dimension, features, emb.horizons)
    } else {
        ModelSpec::univariate(variant, emb.dimension, emb.horizons)
    };
    spec.cell_formula = cfg.cell_formula;
    spec
}

pub fn experiment(cfg: &RunConfig, out: &mut RunDir) -> Result<()> {
    ensure!(!cfg.variants.is_empty(), "no model variants selected");
    ensure!(!cfg.splits.is_empty(), "no split protocols selected");
    let cache = load_cache(cfg, out)?;
    resolve_region(&cache.raw, &cfg.region)?;
    let group = region_group(&cache.raw, &cfg.region, cfg.multivariate);
    let data = prepare(&cache.raw, &group, &cfg.window, &cfg.embedding)?;
    let workers = cfg.workers();
    out.set_seeds(json!({
        "base_seed": cfg.seed,
        "split_seed": cfg.seed,
        "run_seeds": (0..cfg.runs as u64).map(|i| cfg.seed.wrapping_add(i)).collect::<Vec<_>>(),
    }));
    let kind = if cfg.multivariate { "multivariate" } else { "univariate" };
    eprintln!(
        "{} {kind}: {} features, {} samples, {} runs per model on {workers} worker(s)",
        cfg.region,
        group.feature_count(),
        data.embedded.len(),
        cfg.runs
    );

    let mut reports: Vec<ExperimentReport> = Vec::new();
    for &split in &cfg.splits {
        for &variant in &cfg.variants {
            let spec = model_spec(cfg, variant, group.feature_count());
            let train = cfg.training.resolve(variant, cfg.seed);
            let started = std::time::Instant::now();
            let mut report = run_protocol(&spec, &cfg.region, &data, split, &train, cfg.runs, workers)
                .with_context(|| format!("{} {}", variant.label(), split.label()))?;
            report.data_sha256 = Some(cache.sha256.clone());
            eprintln!(
                "  {:<8} {:<13} test RMSE {:>10.1} ± {:<8.1} ({:.1}s)",
                variant.label(),
                split.label(),
                report.test.overall.mean,
                report.test.overall.ci95,
                started.elapsed().as_secs_f64()
            );
            let name = format!(
                "reports/{}-{kind}-{}-{}.json",
                slug(&cfg.region),
                slug(variant.label()),
                split.label()
            );
            out.write_json(&name, &report)?;
            reports.push(report);
        }
    }

    let table = summarize_tables(&reports);
    out.write(&format!("table-{kind}.csv"), table.to_csv()?)?;
    let mut horizons = Vec::new();
    write_horizon_csv(&reports, &mut horizons)?;
    out.write(&format!("horizons-{kind}.csv"), horizons)?;
    let mut train_test = Vec::new();
    write_train_test_csv(&reports, &mut train_test)?;
    out.write(&format!("train-test-{kind}.csv"), train_test)?;
    print!("{}", table.to_text());
    Ok(())
}

pub fn forecast(cfg: &RunConfig, out: &mut RunDir) -> Result<()> {
    if cfg.multivariate {
        bail!(
            "recursive forecasting is univariate only: a multivariate model would need future values of \
             every neighbouring region, which are unknown; drop --multivariate"
        );
    }
    let fc = &cfg.forecast;
    ensure!(fc.days >= 1, "forecast horizon must be at least one day");
    let cache = load_cache(cfg, out)?;
    resolve_region(&cache.raw, &cfg.region)?;
    let group = region_group(&cache.raw, &cfg.region, false);

    let band = if fc.checkpoints.is_empty() {
        let runs = fc.runs.unwrap_or(cfg.runs);
        let data = prepare(&cache.raw, &group, &cfg.window, &cfg.embedding)?;
        let spec = model_spec(cfg, fc.variant, 1);
        let train = cfg.training.resolve(fc.variant, cfg.seed);
        out.set_seeds(json!({
            "base_seed": cfg.seed,
            "run_seeds": (0..runs as u64).map(|i| cfg.seed.wrapping_add(i)).collect::<Vec<_>>(),
        }));
        eprintln!(
            "{}: training {runs} {} model(s) on {} samples, forecasting {} days",
            cfg.region,
            fc.variant.label(),
            data.embedded.len(),
            fc.days
        );
        let (band, models) =
            forecast_with_training(&spec, &data, &train, runs, cfg.workers(), fc.days, fc.feedback)?;
        if fc.save_checkpoints {
            for (i, m) in models.iter().enumerate() {
                let ck = Checkpoint::new(m, data.target_scale(), data.embedding, cfg.seed.wrapping_add(i as u64));
                let p = out.file(&format!("checkpoints/run-{i:03}.json"))?;
                ck.save(&p)?;
            }
        }
        band
    } else {
        let mut checkpoints = Vec::new();
        for p in &fc.checkpoints {
            out.add_input(p)?;
            checkpoints.push(Checkpoint::load(p).with_context(|| format!("loading checkpoint {}", p.display()))?);
        }
        let first = &checkpoints[0];
        for ck in &checkpoints {
            ensure!(ck.spec.input_shape.1 == 1, "recursive forecasting is univariate only; checkpoint has {} features", ck.spec.input_shape.1);
            ensure!(ck.embedding == first.embedding, "checkpoints disagree on the embedding");
        }
        out.set_seeds(json!({ "checkpoint_seeds": checkpoints.iter().map(|c| c.seed).collect::<Vec<_>>() }));
        let data = prepare(&cache.raw, &group, &cfg.window, &first.embedding)?;
        // The history must be expressed in the scale the models were trained on.
        let factor = data.target_scale() / first.scale;
        let history: Vec<f64> = data.target_series().iter().map(|v| v * factor).collect();
        let models = checkpoints.iter().map(Checkpoint::model).collect::<seqcast::Result<Vec<_>>>()?;
        let refs: Vec<&dyn Predictor> = models.iter().map(|m| m as &dyn Predictor).collect();
        recursive_forecast(&refs, &history, &first.embedding, fc.days, first.scale, data.end_date(), fc.feedback)?
    };

    let mut csv = Vec::new();
    band.write_csv(&mut csv)?;
    let written = out.write("forecast.csv", csv)?;
    for i in [0, band.len() - 1] {
        println!(
            "{}  mean {:>10.1}  band [{:.1}, {:.1}]",
            band.dates[i], band.mean[i], band.lower[i], band.upper[i]
        );
    }
    println!("forecast: {} ({} rows, {} model(s))", written.display(), band.len(), band.runs);
    Ok(())
}

#[derive(Serialize)]
struct GradcheckLine {
    variant: Variant,
    max_relative_error: f64,
    worst_tensor: String,
    parameters: usize,
    pass: bool,
}

/// Runs the check on every variant; returns whether all passed.
pub fn gradcheck(cfg: &RunConfig, out: &mut RunDir, perturb: f64) -> Result<bool> {
    let gc = &cfg.gradcheck;
    out.set_seeds(json!({ "seed": cfg.seed }));
    let mut lines = Vec::new();
    for variant in Variant::ALL {
        let mut spec = tiny_spec(variant);
        spec.cell_formula = cfg.cell_formula;
        let report = gradient_check_perturbed(&spec, cfg.seed, gc.epsilon, perturb)?;
        let pass = report.max_relative_error < gc.threshold;
        println!(
            "{:<8} max relative error {:.3e} (worst {}, {} parameters) {}",
            variant.label(),
            report.max_relative_error,
            report.worst_tensor,
            report.parameters,
            if pass { "PASS" } else { "FAIL" }
        );
        lines.push(GradcheckLine {
            variant,
            max_relative_error: report.max_relative_error,
            worst_tensor: report.worst_tensor,
            parameters: report.parameters,
            pass,
        });
    }
    out.write_json("gradcheck.json", &lines)?;
    Ok(lines.iter().all(|l| l.pass))
}

fn parse_month(s: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(&format!("{s}-01"), "%Y-%m-%d")
        .with_context(|| format!("month `{s}` is not of the form YYYY-MM"))
}

pub fn summarize(cfg: &RunConfig, out: &mut RunDir) -> Result<()> {
    let path = data_path(cfg)?;
    out.add_input(&path)?;
    let series = load_csv(&path, LoadOptions { cumulative: cfg.cumulative })
        .with_context(|| format!("loading {}", path.display()))?;
    let sm = &cfg.summarize;
    let states: Vec<_> = series.iter().filter(|s| s.region != NATIONAL).cloned().collect();
    ensure!(!states.is_empty(), "no regions in {}", path.display());

    let months: Vec<NaiveDate> = if sm.months.is_empty() {
        let first = states.iter().map(|s| s.start_date).max().expect("non-empty");
        let last = states.iter().map(|s| s.end_date()).min().expect("non-empty");
        // A month label covers the whole previous calendar month.
        let mut m = NaiveDate::from_ymd_opt(first.year(), first.month(), 1).expect("valid");
        if m < first {
            m = m + Months::new(1);
        }
        let mut out = Vec::new();
        loop {
            let label = m + Months::new(1);
            if label - chrono::Duration::days(1) > last {
                break;
            }
            out.push(label);
            m = label;
        }
        out
    } else {
        sm.months.iter().map(|s| parse_month(s)).collect::<Result<_>>()?
    };

    let mut ranking = String::from("month,rank,region,total\n");
    let mut text = String::new();
    for &month in &months {
        let ranks = monthly_rank(&states, month, sm.top)?;
        let label = month.format("%Y-%m").to_string();
        let _ = write!(text, "{label}:");
        for r in &ranks {
            let _ = writeln!(ranking, "{label},{},{},{}", r.rank, csv_field(&r.region), r.total);
            let _ = write!(text, " {}. {} ({})", r.rank, r.region, r.total);
        }
        text.push('\n');
    }
    out.write("ranking.csv", ranking)?;
    print!("{text}");

    if sm.weekly {
        let regions = if sm.regions.is_empty() {
            available_regions(&series)
        } else {
            sm.regions.clone()
        };
        let mut weekly = String::from("region,week_start,mean\n");
        for name in &regions {
            let s = resolve_region(&series, name)?;
            for w in weekly_average(&s)? {
                let _ = writeln!(weekly, "{},{},{}", csv_field(name), w.week_start, w.mean);
            }
        }
        let written = out.write("weekly.csv", weekly)?;
        println!("weekly averages: {}", written.display());
    }
    Ok(())
}

/// Quotes a CSV field when it needs it.
fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
