//! Public operations against brute-force reimplementations on random inputs.

use chrono::{Datelike, Duration, Months, NaiveDate};
use proptest::prelude::*;

use seqcast::dataio::{monthly_rank, rolling_mean, weekly_average, DailySeries};
use seqcast::embedding::{random_split_sized, takens_embed, EmbeddingConfig};
use seqcast::experiment::{recursive_forecast, rmse, Feedback, Summary};
use seqcast::{Matrix, Predictor, Rng};

fn day0() -> NaiveDate {
    NaiveDate::from_ymd_opt(2020, 1, 27).unwrap()
}

fn series_matrix(n: usize, f: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = Rng::new(seed);
    (0..n).map(|_| (0..f).map(|_| rng.uniform(0.0, 1.0)).collect()).collect()
}

/// Last-value-plus-slope predictor over a univariate window.
struct Trend {
    d: usize,
    h: usize,
    slope: f64,
}

impl Predictor for Trend {
    fn input_shape(&self) -> (usize, usize) {
        (self.d, 1)
    }
    fn horizons(&self) -> usize {
        self.h
    }
    fn predict(&self, w: &Matrix) -> seqcast::Result<Vec<f64>> {
        let last = w.get(self.d - 1, 0);
        Ok((1..=self.h).map(|k| last + self.slope * k as f64).collect())
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn embedding_matches_enumeration(
        n in 1usize..60, f in 1usize..4, d in 1usize..7, lag in 1usize..5, h in 1usize..6,
        contiguous in any::<bool>(), seed in any::<u64>(),
    ) {
        let rows = series_matrix(n, f, seed);
        let cfg = EmbeddingConfig { dimension: d, time_lag: lag, horizons: h, contiguous };
        let stride = if contiguous { 1 } else { lag };
        let span = (d - 1) * stride;
        let expected: Vec<usize> = (span..n).filter(|t| t + h < n).collect();
        match takens_embed(&Matrix::from_rows(&rows).unwrap(), day0(), &cfg) {
            Ok(ds) => {
                prop_assert_eq!(ds.len(), expected.len());
                prop_assert_eq!(cfg.sample_count(n), expected.len());
                for (i, &t) in expected.iter().enumerate() {
                    for k in 0..d {
                        prop_assert_eq!(ds.inputs[i].row(k), rows[t - span + k * stride].as_slice());
                    }
                    let target: Vec<f64> = (1..=h).map(|j| rows[t + j][0]).collect();
                    prop_assert_eq!(&ds.targets[i], &target);
                    prop_assert_eq!(ds.anchor_dates[i], day0() + Duration::days(t as i64));
                    prop_assert_eq!(ds.origin[i], i);
                }
            }
            Err(_) => prop_assert!(expected.is_empty()),
        }
    }

    #[test]
    fn random_split_partitions(n in 2usize..200, frac in 0.0f64..1.0, seed in any::<u64>()) {
        let rows = series_matrix(n + 2, 1, seed);
        let cfg = EmbeddingConfig { dimension: 1, time_lag: 1, horizons: 1, contiguous: false };
        let ds = takens_embed(&Matrix::from_rows(&rows).unwrap(), day0(), &cfg).unwrap();
        let k = (ds.len() as f64 * frac) as usize;
        let (train, test) = random_split_sized(&ds, k, &mut Rng::new(seed)).unwrap();
        prop_assert_eq!(train.len(), k);
        let mut all: Vec<usize> = train.origin.iter().chain(&test.origin).copied().collect();
        prop_assert!(train.origin.windows(2).all(|w| w[0] < w[1]));
        all.sort_unstable();
        prop_assert_eq!(all, (0..ds.len()).collect::<Vec<_>>());
        let (again, _) = random_split_sized(&ds, k, &mut Rng::new(seed)).unwrap();
        prop_assert_eq!(again.origin, train.origin);
    }

    #[test]
    fn rmse_matches_definition(pairs in prop::collection::vec((-1e4f64..1e4, -1e4f64..1e4), 1..80)) {
        let (y, p): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let mut sq = 0.0;
        for i in 0..y.len() {
            sq += (y[i] - p[i]) * (y[i] - p[i]);
        }
        let want = (sq / y.len() as f64).sqrt();
        let got = rmse(&y, &p).unwrap();
        prop_assert!((got - want).abs() <= 1e-12 * want.max(1.0));
        prop_assert_eq!(rmse(&y, &y).unwrap(), 0.0);
        prop_assert_eq!(got, rmse(&p, &y).unwrap());
    }

    #[test]
    fn ranking_matches_sort_of_calendar_sums(
        regions in 1usize..7, offset in 0i64..40, days in 64usize..130, top in 1usize..8, seed in any::<u64>(),
    ) {
        let mut rng = Rng::new(seed);
        let start = day0() + Duration::days(offset);
        let mut series: Vec<DailySeries> = Vec::new();
        for r in 0..regions {
            // Some regions copy an earlier one to force ties.
            let values = if r > 0 && rng.bernoulli(0.3) {
                series[rng.below(r)].values.clone()
            } else {
                (0..days).map(|_| rng.below(20) as f64).collect()
            };
            series.push(DailySeries::new(format!("{}", (b'Z' - r as u8) as char), start, values).unwrap());
        }
        let first_full = NaiveDate::from_ymd_opt(start.year(), start.month(), 1).unwrap() + Months::new(2);
        let mut month = first_full;
        while month - Duration::days(1) <= series[0].end_date() {
            let prev = month - Months::new(1);
            let mut want: Vec<(String, f64)> = series.iter().map(|s| {
                let total = (0..s.len()).filter(|&i| {
                    let d = s.date_at(i);
                    (d.year(), d.month()) == (prev.year(), prev.month())
                }).map(|i| s.values[i]).sum();
                (s.region.clone(), total)
            }).collect();
            want.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            want.truncate(top);
            let got: Vec<(String, f64)> = monthly_rank(&series, month, top).unwrap()
                .into_iter().map(|e| (e.region, e.total)).collect();
            prop_assert_eq!(got, want);
            month = month + Months::new(1);
        }
        // The month before the data starts is not covered.
        prop_assert!(monthly_rank(&series, first_full - Months::new(2), top).is_err());
    }

    #[test]
    fn weekly_means_cover_full_weeks(values in prop::collection::vec(0.0f64..1e5, 7..80)) {
        let s = DailySeries::new("X", day0(), values.clone()).unwrap();
        let weeks = weekly_average(&s).unwrap();
        prop_assert_eq!(weeks.len(), values.len() / 7);
        for (w, m) in weeks.iter().enumerate() {
            let block = &values[7 * w..7 * w + 7];
            let want = block.iter().sum::<f64>() / 7.0;
            prop_assert!((m.mean - want).abs() <= 1e-12 * want.max(1.0));
            prop_assert_eq!(m.week_start, day0() + Duration::days(7 * w as i64));
        }
    }

    #[test]
    fn rolling_mean_is_a_trailing_average(values in prop::collection::vec(0.0f64..1e4, 1..60), w in 1usize..8) {
        let s = DailySeries::new("X", day0(), values.clone()).unwrap();
        let r = rolling_mean(&s, w).unwrap();
        prop_assert_eq!(r.len(), values.len());
        for t in 0..values.len() {
            let lo = t.saturating_sub(w - 1);
            let want = values[lo..=t].iter().sum::<f64>() / (t - lo + 1) as f64;
            prop_assert!((r.values[t] - want).abs() <= 1e-9 * want.max(1.0));
        }
    }

    #[test]
    fn forecast_band_is_ordered_and_nonnegative(
        slopes in prop::collection::vec(-0.2f64..0.2, 1..5), days in 1usize..40, one_step in any::<bool>(),
    ) {
        let cfg = EmbeddingConfig::default();
        let history: Vec<f64> = (0..30).map(|i| 0.5 + 0.01 * i as f64).collect();
        let models: Vec<Trend> = slopes.iter().map(|&slope| Trend { d: 6, h: 4, slope }).collect();
        let refs: Vec<&dyn Predictor> = models.iter().map(|m| m as &dyn Predictor).collect();
        let feedback = if one_step { Feedback::OneStep } else { Feedback::AllSteps };
        let band = recursive_forecast(&refs, &history, &cfg, days, 1000.0, day0(), feedback).unwrap();
        prop_assert_eq!(band.len(), days);
        prop_assert_eq!(band.dates[0], day0() + Duration::days(1));
        for i in 0..days {
            prop_assert!(0.0 <= band.lower[i] && band.lower[i] <= band.mean[i] && band.mean[i] <= band.upper[i]);
            if models.len() == 1 {
                prop_assert_eq!(band.lower[i], band.mean[i]);
                prop_assert_eq!(band.upper[i], band.mean[i]);
            }
        }
    }

    #[test]
    fn summary_interval_uses_sample_std(values in prop::collection::vec(-1e3f64..1e3, 2..40)) {
        let s = Summary::of(&values);
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        prop_assert!((s.mean - mean).abs() <= 1e-9);
        prop_assert!((s.std - var.sqrt()).abs() <= 1e-9 * var.sqrt().max(1.0));
        prop_assert!((s.ci95 - 1.96 * s.std / n.sqrt()).abs() <= 1e-12 * s.ci95.max(1.0));
    }
}
