//! Adam training loop, gradient checking and per-epoch history.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddedDataset;
use crate::error::{Error, Result};
use crate::models::{backward, backward_into, forward, loss, DropoutMask, GradientSet, Model, ModelParams, ModelSpec, Variant};
use crate::numerics::{Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    /// One update per epoch from the gradient averaged over every sample.
    Full,
    /// Updates from shuffled chunks of the given size.
    Minibatch(usize),
}

impl Default for BatchMode {
    fn default() -> Self {
        BatchMode::Minibatch(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_mode: BatchMode,
    pub dropout_rate: f64,
    pub seed: u64,
    /// Rescale gradients whose global L2 norm exceeds this value.
    pub clip_norm: Option<f64>,
    /// Stop once the epoch loss has not improved for this many epochs.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_mode: BatchMode::default(),
            dropout_rate: 0.2,
            seed: 0,
            clip_norm: None,
            patience: None,
        }
    }
}

impl TrainConfig {
    /// Defaults with the per-variant learning rate.
    pub fn for_variant(variant: Variant) -> Self {
        Self {
            learning_rate: default_learning_rate(variant),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidArgument(format!(
                "betas must lie in [0, 1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if self.batch_mode == BatchMode::Minibatch(0) {
            return Err(Error::InvalidArgument("minibatch size must be positive".into()));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::InvalidArgument("clip norm must be positive".into()));
        }
        Ok(())
    }
}

pub fn default_learning_rate(variant: Variant) -> f64 {
    match variant {
        Variant::Plain | Variant::Bidirectional => 0.005,
        Variant::EncoderDecoder => 0.002,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: GradientSet,
    pub v: GradientSet,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            m: GradientSet::zeros_like(params),
            v: GradientSet::zeros_like(params),
            t: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub loss: Vec<f64>,
    pub wall_seconds: Vec<f64>,
}

impl TrainHistory {
    pub fn epochs(&self) -> usize {
        self.loss.len()
    }
}

pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::shape("mse_loss", pred.len(), target.len()));
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("mse_loss of empty vectors".into()));
    }
    Ok(pred.iter().zip(target).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / pred.len() as f64)
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut ModelParams, grads: &GradientSet, state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    let g = grads.slices();
    let mut p = params.slices_mut();
    let mut m = state.m.slices_mut();
    let mut v = state.v.slices_mut();
    if g.len() != p.len() || m.len() != p.len() || v.len() != p.len() {
        return Err(Error::shape("adam_step tensors", p.len(), g.len()));
    }
    for i in 0..p.len() {
        let n = p[i].len();
        if g[i].len() != n || m[i].len() != n || v[i].len() != n {
            return Err(Error::shape("adam_step tensor", n, g[i].len()));
        }
    }
    state.t += 1;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    let step = cfg.learning_rate / c1;
    let inv_c2 = 1.0 / c2;
    let (a1, a2, eps) = (1.0 - b1, 1.0 - b2, cfg.epsilon);
    for i in 0..p.len() {
        let n = p[i].len();
        let (p, g, m, v) = (&mut p[i][..n], &g[i][..n], &mut m[i][..n], &mut v[i][..n]);
        for k in 0..n {
            m[k] = b1 * m[k] + a1 * g[k];
            v[k] = b2 * v[k] + a2 * g[k] * g[k];
            p[k] -= step * m[k] / ((v[k] * inv_c2).sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: TrainHistory,
}

fn check_dataset(spec: &ModelSpec, ds: &EmbeddedDataset) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset("training set"));
    }
    let shape = ds.window_shape().expect("non-empty");
    if shape != spec.input_shape {
        return Err(Error::shape(
            "training window",
            format!("{:?}", spec.input_shape),
            format!("{shape:?}"),
        ));
    }
    let horizons = ds.horizons().expect("non-empty");
    if horizons != spec.horizons {
        return Err(Error::shape("training target", spec.horizons, horizons));
    }
    Ok(())
}

/// Fits a freshly initialised model. The dropout rate in `cfg` replaces the
/// one in `spec`. A single generator seeded from `cfg.seed` drives
/// initialisation, the per-epoch shuffle and every dropout mask.
pub fn train(spec: &ModelSpec, train_ds: &EmbeddedDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut spec = spec.clone();
    spec.dropout_rate = cfg.dropout_rate;
    spec.validate()?;
    check_dataset(&spec, train_ds)?;

    let mut rng = Rng::new(cfg.seed);
    let mut params = ModelParams::init(&spec, &mut rng)?;
    let mut adam = AdamState::new(&params);
    let mut g = GradientSet::zeros_like(&params);
    let mut history = TrainHistory::default();
    let n = train_ds.len();
    let mut best = f64::INFINITY;
    let mut stale = 0usize;

    for _ in 0..cfg.epochs {
        let started = Instant::now();
        let order = rng.permutation(n);
        let chunk = match cfg.batch_mode {
            BatchMode::Full => n,
            BatchMode::Minibatch(k) => k,
        };
        let mut total = 0.0;
        for batch in order.chunks(chunk) {
            for s in g.slices_mut() {
                s.fill(0.0);
            }
            for &i in batch {
                let mask = (spec.dropout_rate > 0.0).then(|| DropoutMask::sample(&spec, &mut rng));
                let cache = forward(&train_ds.inputs[i], &spec, &params, mask.as_ref())?;
                total += loss(&cache, &train_ds.targets[i])?;
                backward_into(&cache, &train_ds.targets[i], &spec, &params, &mut g)?;
            }
            if batch.len() > 1 {
                g.scale(1.0 / batch.len() as f64);
            }
            if let Some(limit) = cfg.clip_norm {
                let norm = g.l2_norm();
                if norm > limit {
                    g.scale(limit / norm);
                }
            }
            adam_step(&mut params, &g, &mut adam, cfg)?;
        }
        let epoch_loss = total / n as f64;
        history.loss.push(epoch_loss);
        history.wall_seconds.push(started.elapsed().as_secs_f64());

        if let Some(patience) = cfg.patience {
            if epoch_loss < best {
                best = epoch_loss;
                stale = 0;
            } else {
                stale += 1;
                if stale >= patience {
                    break;
                }
            }
        }
    }
    Ok(TrainOutcome {
        model: Model { spec, params },
        history,
    })
}

/// Root mean squared error of a model over a dataset, pooled over every
/// sample and horizon.
pub fn dataset_rmse(model: &Model, ds: &EmbeddedDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset("evaluation set"));
    }
    let mut total = 0.0;
    for (x, y) in ds.inputs.iter().zip(&ds.targets) {
        let cache = model.forward(x, None)?;
        total += loss(&cache, y)?;
    }
    Ok((total / ds.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Tensor holding the worst entry.
    pub worst_tensor: String,
    pub parameters: usize,
}

/// Compares the analytic gradient with central differences on one sample,
/// without dropout. `perturb` is added to every analytic entry, which lets
/// callers confirm that a wrong gradient is detected.
pub fn gradient_check_with(
    spec: &ModelSpec,
    params: &ModelParams,
    window: &Matrix,
    target: &[f64],
    epsilon: f64,
    perturb: f64,
) -> Result<GradCheckReport> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
    }
    let cache = forward(window, spec, params, None)?;
    let analytic = backward(&cache, target, spec, params)?;
    let names = params.tensor_names(spec);
    let mut p = params.clone();
    let mut worst = (0.0f64, String::new());
    let sizes: Vec<usize> = p.slices().iter().map(|s| s.len()).collect();
    for (t, &len) in sizes.iter().enumerate() {
        for j in 0..len {
            let orig = p.slices()[t][j];
            p.slices_mut()[t][j] = orig + epsilon;
            let plus = loss(&forward(window, spec, &p, None)?, target)?;
            p.slices_mut()[t][j] = orig - epsilon;
            let minus = loss(&forward(window, spec, &p, None)?, target)?;
            p.slices_mut()[t][j] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic.slices()[t][j] + perturb;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            if rel > worst.0 {
                worst = (rel, names[t].clone());
            }
        }
    }
    Ok(GradCheckReport {
        max_relative_error: worst.0,
        worst_tensor: worst.1,
        parameters: params.parameter_count(),
    })
}

/// Gradient check with parameters, window and target drawn from `seed`.
pub fn gradient_check(spec: &ModelSpec, seed: u64, epsilon: f64) -> Result<GradCheckReport> {
    gradient_check_perturbed(spec, seed, epsilon, 0.0)
}

/// [`gradient_check`] with `perturb` added to the analytic gradient.
pub fn gradient_check_perturbed(spec: &ModelSpec, seed: u64, epsilon: f64, perturb: f64) -> Result<GradCheckReport> {
    let mut rng = Rng::new(seed);
    let params = ModelParams::init(spec, &mut rng)?;
    let (d, f) = spec.input_shape;
    let window = Matrix::from_vec(d, f, (0..d * f).map(|_| rng.uniform(0.0, 1.0)).collect())?;
    let target: Vec<f64> = (0..spec.horizons).map(|_| rng.uniform(0.0, 1.0)).collect();
    gradient_check_with(spec, &params, &window, &target, epsilon, perturb)
}

/// Small networks of each variant suitable for [`gradient_check`].
pub fn tiny_spec(variant: Variant) -> ModelSpec {
    let layer_sizes = match variant {
        Variant::Plain | Variant::Bidirectional => vec![2],
        Variant::EncoderDecoder => vec![3],
    };
    ModelSpec {
        variant,
        input_shape: (4, 2),
        layer_sizes,
        horizons: 3,
        dropout_rate: 0.0,
        cell_formula: Default::default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{takens_embed, EmbeddingConfig};
    use chrono::NaiveDate;

    fn scalar_params(theta: f64) -> (ModelSpec, ModelParams) {
        let spec = ModelSpec {
            variant: Variant::Plain,
            input_shape: (1, 1),
            layer_sizes: vec![1],
            horizons: 1,
            dropout_rate: 0.0,
            cell_formula: Default::default(),
        };
        let mut p = ModelParams::zeros(&spec).unwrap();
        p.head.b.as_mut_slice()[0] = theta;
        (spec, p)
    }

    fn only_bias_grad(p: &ModelParams, g: f64) -> GradientSet {
        let mut grads = GradientSet::zeros_like(p);
        grads.0.head.b.as_mut_slice()[0] = g;
        grads
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse_loss(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 12.5);
        assert_eq!(mse_loss(&[0.3, -1.2], &[2.0, 0.1]).unwrap(), mse_loss(&[2.0, 0.1], &[0.3, -1.2]).unwrap());
        assert!(mse_loss(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let spec = ModelSpec::univariate(Variant::Plain, 6, 4);
        let params = ModelParams::init(&spec, &mut Rng::new(1)).unwrap();
        let mut p = params.clone();
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &GradientSet::zeros_like(&params), &mut st, &TrainConfig::default()).unwrap();
        assert_eq!(p, params);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_first_step_hand_value() {
        let (_, mut p) = scalar_params(0.0);
        let mut st = AdamState::new(&p);
        let cfg = TrainConfig {
            learning_rate: 0.001,
            ..TrainConfig::default()
        };
        { let g = only_bias_grad(&p, 0.1); adam_step(&mut p, &g, &mut st, &cfg).unwrap() }
        let theta = p.head.b[0];
        // m̂ = 0.1, v̂ = 0.01, so the step is lr·0.1/(0.1 + 1e-8).
        assert!((theta - (-0.001 * 0.1 / (0.1 + 1e-8))).abs() < 1e-18);
        assert!((theta + 0.000999999).abs() < 1e-9);
    }

    #[test]
    fn adam_descends_quadratic() {
        let (_, mut p) = scalar_params(1.0);
        let mut st = AdamState::new(&p);
        let cfg = TrainConfig {
            learning_rate: 0.01,
            ..TrainConfig::default()
        };
        for _ in 0..100 {
            let theta = p.head.b[0];
            { let g = only_bias_grad(&p, 2.0 * theta); adam_step(&mut p, &g, &mut st, &cfg).unwrap() }
        }
        assert!(p.head.b[0].abs() < 1.0);
    }

    #[test]
    fn adam_motion_decays_without_gradient() {
        let (_, mut p) = scalar_params(0.0);
        let mut st = AdamState::new(&p);
        let cfg = TrainConfig::default();
        for _ in 0..5 {
            { let g = only_bias_grad(&p, 0.5); adam_step(&mut p, &g, &mut st, &cfg).unwrap() }
        }
        let mut prev_delta = f64::INFINITY;
        for t in 6..60 {
            let before = p.head.b[0];
            { let g = only_bias_grad(&p, 0.0); adam_step(&mut p, &g, &mut st, &cfg).unwrap() }
            let delta = (p.head.b[0] - before).abs();
            if t > 10 {
                assert!(delta <= prev_delta, "step {t}: {delta} > {prev_delta}");
            }
            prev_delta = delta;
        }
    }

    #[test]
    fn adam_rejects_incongruent_gradients() {
        let spec = ModelSpec::univariate(Variant::Plain, 6, 4);
        let other = ModelSpec::univariate(Variant::EncoderDecoder, 6, 4);
        let mut p = ModelParams::zeros(&spec).unwrap();
        let g = GradientSet::zeros_like(&ModelParams::zeros(&other).unwrap());
        let mut st = AdamState::new(&p);
        assert!(adam_step(&mut p, &g, &mut st, &TrainConfig::default()).is_err());
    }

    fn ramp_dataset(n: usize) -> EmbeddedDataset {
        let values: Vec<f64> = (0..n).map(|t| (t as f64 / 7.0).sin() * 0.4 + 0.5).collect();
        let m = Matrix::from_vec(n, 1, values).unwrap();
        takens_embed(&m, NaiveDate::from_ymd_opt(2021, 1, 1).unwrap(), &EmbeddingConfig::default()).unwrap()
    }

    #[test]
    fn zero_epochs_returns_initialisation() {
        let spec = ModelSpec::univariate(Variant::Bidirectional, 6, 4);
        let cfg = TrainConfig {
            epochs: 0,
            seed: 9,
            ..TrainConfig::default()
        };
        let out = train(&spec, &ramp_dataset(40), &cfg).unwrap();
        assert_eq!(out.model.params, ModelParams::init(&spec, &mut Rng::new(9)).unwrap());
        assert!(out.history.loss.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let ds = ramp_dataset(60);
        for variant in Variant::ALL {
            let spec = ModelSpec::univariate(variant, 6, 4);
            let cfg = TrainConfig {
                epochs: 15,
                seed: 3,
                ..TrainConfig::for_variant(variant)
            };
            let a = train(&spec, &ds, &cfg).unwrap();
            let b = train(&spec, &ds, &cfg).unwrap();
            assert_eq!(a.model.params, b.model.params);
            assert_eq!(a.history.loss, b.history.loss);
            assert_eq!(a.history.epochs(), 15);
            assert!(a.history.loss[14] < a.history.loss[0], "{variant}: {:?}", a.history.loss);
        }
    }

    #[test]
    fn batch_modes_and_patience() {
        let ds = ramp_dataset(40);
        let spec = ModelSpec::univariate(Variant::Plain, 6, 4);
        for mode in [BatchMode::Full, BatchMode::Minibatch(8)] {
            let cfg = TrainConfig {
                epochs: 3,
                batch_mode: mode,
                clip_norm: Some(1.0),
                ..TrainConfig::default()
            };
            assert_eq!(train(&spec, &ds, &cfg).unwrap().history.epochs(), 3);
        }
        let cfg = TrainConfig {
            epochs: 50,
            patience: Some(1),
            learning_rate: 0.5,
            ..TrainConfig::default()
        };
        assert!(train(&spec, &ds, &cfg).unwrap().history.epochs() < 50);
    }

    #[test]
    fn train_rejects_bad_inputs() {
        let ds = ramp_dataset(40);
        let spec = ModelSpec::univariate(Variant::Plain, 5, 4);
        assert!(train(&spec, &ds, &TrainConfig::default()).is_err());
        let spec = ModelSpec::univariate(Variant::Plain, 6, 4);
        assert!(train(&spec, &ds.select(&[]), &TrainConfig::default()).is_err());
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(train(&spec, &ds, &bad).is_err());
    }

    #[test]
    fn gradient_check_tiny_networks() {
        for variant in Variant::ALL {
            for seed in [0, 1, 2] {
                let spec = tiny_spec(variant);
                assert!(ModelParams::zeros(&spec).unwrap().parameter_count() <= 500);
                let r = gradient_check(&spec, seed, 1e-5).unwrap();
                assert!(r.max_relative_error < 1e-4, "{variant} seed {seed}: {r:?}");
            }
        }
    }

    #[test]
    fn gradient_check_detects_perturbation() {
        let spec = tiny_spec(Variant::Plain);
        let mut rng = Rng::new(1);
        let params = ModelParams::init(&spec, &mut rng).unwrap();
        let window = Matrix::from_vec(4, 2, (0..8).map(|i| i as f64 / 8.0).collect()).unwrap();
        let r = gradient_check_with(&spec, &params, &window, &[0.1, 0.2, 0.3], 1e-5, 1e-3).unwrap();
        assert!(r.max_relative_error > 1e-4);
    }
}
