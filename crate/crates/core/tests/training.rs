use std::sync::OnceLock;

use chrono::NaiveDate;

use seqcast::embedding::{takens_embed, EmbeddedDataset, EmbeddingConfig};
use seqcast::training::{dataset_rmse, train, TrainConfig, TrainOutcome};
use seqcast::{Matrix, ModelSpec, Variant};

fn sine(points: usize) -> EmbeddedDataset {
    let values = (0..points)
        .map(|i| (2.0 * std::f64::consts::PI * i as f64 / 40.0).sin())
        .collect();
    let start = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
    takens_embed(&Matrix::from_vec(points, 1, values).unwrap(), start, &EmbeddingConfig::default()).unwrap()
}

/// The smoke-test run: 300 epochs on a 400-point sine, dropout off.
fn sine_run() -> &'static TrainOutcome {
    static RUN: OnceLock<(EmbeddedDataset, TrainOutcome)> = OnceLock::new();
    &RUN.get_or_init(|| {
        let ds = sine(400);
        let spec = ModelSpec::univariate(Variant::Plain, 6, 4);
        let cfg = TrainConfig {
            epochs: 300,
            dropout_rate: 0.0,
            ..TrainConfig::for_variant(Variant::Plain)
        };
        let out = train(&spec, &ds, &cfg).unwrap();
        (ds, out)
    })
    .1
}

#[test]
fn sine_is_overfit() {
    let out = sine_run();
    assert_eq!(out.history.loss.len(), 300);
    assert_eq!(out.history.epochs(), 300);
    let err = dataset_rmse(&out.model, &sine(400)).unwrap();
    assert!(err < 0.02, "train RMSE {err}");
}

/// After epoch 50 the 20-epoch moving average of the training loss never
/// rises.
#[test]
fn sine_loss_moving_average_is_non_increasing() {
    let loss = &sine_run().history.loss;
    let avg: Vec<f64> = loss[50..].windows(20).map(|w| w.iter().sum::<f64>() / 20.0).collect();
    let rises: Vec<(usize, f64)> = avg
        .windows(2)
        .enumerate()
        .filter(|(_, p)| p[1] > p[0])
        .map(|(k, p)| (k + 51, p[1] / p[0]))
        .collect();
    assert!(
        rises.is_empty(),
        "moving average rose at {} of {} steps; first at epoch {} (x{:.3}), largest x{:.3}",
        rises.len(),
        avg.len() - 1,
        rises[0].0,
        rises[0].1,
        rises.iter().map(|r| r.1).fold(0.0, f64::max)
    );
}

#[test]
fn seed_fixes_every_parameter() {
    let ds = sine(120);
    for variant in Variant::ALL {
        let spec = ModelSpec::univariate(variant, 6, 4);
        let cfg = TrainConfig {
            epochs: 3,
            seed: 17,
            ..TrainConfig::for_variant(variant)
        };
        let a = train(&spec, &ds, &cfg).unwrap();
        let b = train(&spec, &ds, &cfg).unwrap();
        assert_eq!(a.model, b.model, "{variant:?}");
        assert_eq!(a.history.loss, b.history.loss);
        let c = train(&spec, &ds, &TrainConfig { seed: 18, ..cfg }).unwrap();
        assert_ne!(a.model, c.model);
    }
}

#[test]
fn training_reduces_loss_for_every_variant() {
    let ds = sine(160);
    for variant in Variant::ALL {
        let spec = ModelSpec::univariate(variant, 6, 4);
        let cfg = TrainConfig {
            epochs: 15,
            ..TrainConfig::for_variant(variant)
        };
        let untrained = train(&spec, &ds, &TrainConfig { epochs: 0, ..cfg.clone() }).unwrap();
        let trained = train(&spec, &ds, &cfg).unwrap();
        let before = dataset_rmse(&untrained.model, &ds).unwrap();
        let after = dataset_rmse(&trained.model, &ds).unwrap();
        assert!(after < 0.5 * before, "{variant:?}: {before} -> {after}");
    }
}
