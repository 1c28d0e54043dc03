//! The three recurrent forecasters and their exact reverse-mode gradients.
//!
//! Every variant reads a `D × F` window oldest row first and emits the
//! `horizons` next values of feature 0:
//!
//! * [`Variant::Plain`]: stacked LSTM layers, each consuming the full hidden
//!   sequence of the layer below; the last hidden state feeds a linear head.
//! * [`Variant::Bidirectional`]: a forward and a backward LSTM over the
//!   window whose per-step states are concatenated, optionally followed by
//!   unidirectional layers.
//! * [`Variant::EncoderDecoder`]: an encoder LSTM whose final `(h, c)` seeds a
//!   decoder LSTM run for `horizons` steps on the repeated encoder output; a
//!   shared one-unit head maps each decoder state to one forecast value.
//!
//! Training loss is the mean squared error over the horizons. Dropout is
//! inverted dropout on recurrent layer outputs, applied only when a
//! [`DropoutMask`] is passed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    dot, init_uniform, matvec_acc, matvec_t_acc, outer_acc, sigmoid_in_place, tanh_in_place,
    Matrix, Rng, Vector,
};

pub const GATE_INPUT: usize = 0;
pub const GATE_FORGET: usize = 1;
pub const GATE_OUTPUT: usize = 2;
pub const GATE_CANDIDATE: usize = 3;
const GATE_NAMES: [&str; 4] = ["i", "f", "o", "c"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Plain,
    Bidirectional,
    EncoderDecoder,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Plain, Variant::Bidirectional, Variant::EncoderDecoder];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Plain => "LSTM",
            Variant::Bidirectional => "BD-LSTM",
            Variant::EncoderDecoder => "ED-LSTM",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "plain" | "lstm" => Ok(Variant::Plain),
            "bidirectional" | "bdlstm" | "bd" => Ok(Variant::Bidirectional),
            "encoderdecoder" | "edlstm" | "ed" => Ok(Variant::EncoderDecoder),
            _ => Err(Error::InvalidArgument(format!("unknown model variant `{s}`"))),
        }
    }
}

/// How the cell memory is updated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellFormula {
    /// `c = f∘c_prev + i∘c̃`.
    #[default]
    Standard,
    /// `c = σ(f∘c_prev + i∘c̃)`, squashing the memory into (0, 1).
    Squashed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    /// `(D, F)`: window length and features per step.
    pub input_shape: (usize, usize),
    pub layer_sizes: Vec<usize>,
    /// Number of forecast steps (the output is `1 × horizons`).
    pub horizons: usize,
    pub dropout_rate: f64,
    #[serde(default)]
    pub cell_formula: CellFormula,
}

impl ModelSpec {
    /// Single-feature topologies: LSTM 32-32, BD-LSTM 32-16, ED-LSTM 32.
    pub fn univariate(variant: Variant, window: usize, horizons: usize) -> Self {
        let layer_sizes = match variant {
            Variant::Plain => vec![32, 32],
            Variant::Bidirectional => vec![32, 16],
            Variant::EncoderDecoder => vec![32],
        };
        Self {
            variant,
            input_shape: (window, 1),
            layer_sizes,
            horizons,
            dropout_rate: 0.2,
            cell_formula: CellFormula::Standard,
        }
    }

    /// Multi-feature topologies: one 32-unit recurrent layer for each variant.
    pub fn multivariate(variant: Variant, window: usize, features: usize, horizons: usize) -> Self {
        Self {
            variant,
            input_shape: (window, features),
            layer_sizes: vec![32],
            horizons,
            dropout_rate: 0.2,
            cell_formula: CellFormula::Standard,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (d, f) = self.input_shape;
        if d == 0 || f == 0 || self.horizons == 0 {
            return Err(Error::InvalidArgument(format!(
                "input shape {:?} and horizons {} must be positive",
                self.input_shape, self.horizons
            )));
        }
        if self.layer_sizes.is_empty() || self.layer_sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "layer sizes must be non-empty and positive, got {:?}",
                self.layer_sizes
            )));
        }
        if self.variant == Variant::EncoderDecoder && self.layer_sizes.len() != 1 {
            return Err(Error::Unsupported(format!(
                "encoder-decoder takes a single size shared by encoder and decoder, got {:?}",
                self.layer_sizes
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// `(input, hidden)` of every LSTM layer in parameter order.
    fn lstm_shapes(&self) -> Vec<(usize, usize)> {
        let f = self.input_shape.1;
        let s = &self.layer_sizes;
        match self.variant {
            Variant::Plain => {
                let mut input = f;
                s.iter()
                    .map(|&h| {
                        let shape = (input, h);
                        input = h;
                        shape
                    })
                    .collect()
            }
            Variant::Bidirectional => {
                let mut shapes = vec![(f, s[0]), (f, s[0])];
                let mut input = 2 * s[0];
                for &h in &s[1..] {
                    shapes.push((input, h));
                    input = h;
                }
                shapes
            }
            Variant::EncoderDecoder => vec![(f, s[0]), (s[0], s[0])],
        }
    }

    /// `(outputs, inputs)` of the dense head.
    fn head_shape(&self) -> (usize, usize) {
        let s = &self.layer_sizes;
        match self.variant {
            Variant::Plain => (self.horizons, *s.last().expect("validated")),
            Variant::Bidirectional if s.len() == 1 => (self.horizons, 2 * s[0]),
            Variant::Bidirectional => (self.horizons, *s.last().expect("validated")),
            Variant::EncoderDecoder => (1, s[0]),
        }
    }

    /// `(steps, width)` of each dropout site.
    fn dropout_sites(&self) -> Vec<(usize, usize)> {
        let d = self.input_shape.0;
        let s = &self.layer_sizes;
        match self.variant {
            Variant::Plain => s.iter().map(|&h| (d, h)).collect(),
            Variant::Bidirectional => std::iter::once((d, 2 * s[0]))
                .chain(s[1..].iter().map(|&h| (d, h)))
                .collect(),
            Variant::EncoderDecoder => vec![(1, s[0]), (self.horizons, s[0])],
        }
    }

    fn layer_names(&self) -> Vec<String> {
        match self.variant {
            Variant::Plain => (0..self.layer_sizes.len()).map(|i| format!("lstm{i}")).collect(),
            Variant::Bidirectional => ["forward".to_string(), "backward".to_string()]
                .into_iter()
                .chain((1..self.layer_sizes.len()).map(|i| format!("lstm{i}")))
                .collect(),
            Variant::EncoderDecoder => vec!["encoder".into(), "decoder".into()],
        }
    }
}

/// Weights of one LSTM layer, gates ordered input, forget, output, candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmLayerParams {
    pub input_size: usize,
    pub hidden: usize,
    /// Input weights, `hidden × input_size`.
    pub u: [Matrix; 4],
    /// Recurrent weights, `hidden × hidden`.
    pub w: [Matrix; 4],
    pub b: [Vector; 4],
}

impl LstmLayerParams {
    pub fn zeros(input_size: usize, hidden: usize) -> Result<Self> {
        let u = Matrix::zeros(hidden, input_size)?;
        let w = Matrix::zeros(hidden, hidden)?;
        let b = Vector::zeros(hidden)?;
        Ok(Self {
            input_size,
            hidden,
            u: [u.clone(), u.clone(), u.clone(), u],
            w: [w.clone(), w.clone(), w.clone(), w],
            b: [b.clone(), b.clone(), b.clone(), b],
        })
    }

    /// Uniform on `±1/√(input_size + hidden)` for weights and biases alike.
    pub fn init(input_size: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        let bound = 1.0 / ((input_size + hidden) as f64).sqrt();
        let mut p = Self::zeros(input_size, hidden)?;
        for g in 0..4 {
            p.u[g] = init_uniform(rng, hidden, input_size, bound)?;
            p.w[g] = init_uniform(rng, hidden, hidden, bound)?;
            p.b[g] = Vector::new(init_uniform(rng, hidden, 1, bound)?.into_vec())?;
        }
        Ok(p)
    }

    fn slices(&self) -> impl Iterator<Item = &[f64]> {
        self.u
            .iter()
            .map(Matrix::as_slice)
            .chain(self.w.iter().map(Matrix::as_slice))
            .chain(self.b.iter().map(Vector::as_slice))
    }

    fn slices_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.u
            .iter_mut()
            .map(Matrix::as_mut_slice)
            .chain(self.w.iter_mut().map(Matrix::as_mut_slice))
            .chain(self.b.iter_mut().map(Vector::as_mut_slice))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `outputs × inputs`.
    pub w: Matrix,
    pub b: Vector,
}

impl Dense {
    fn zeros(outputs: usize, inputs: usize) -> Result<Self> {
        Ok(Self {
            w: Matrix::zeros(outputs, inputs)?,
            b: Vector::zeros(outputs)?,
        })
    }

    fn init(outputs: usize, inputs: usize, rng: &mut Rng) -> Result<Self> {
        let bound = 1.0 / (inputs as f64).sqrt();
        Ok(Self {
            w: init_uniform(rng, outputs, inputs, bound)?,
            b: Vector::new(init_uniform(rng, outputs, 1, bound)?.into_vec())?,
        })
    }
}

/// All trainable tensors of a model. Layer roles depend on the variant:
/// plain `[lstm0, lstm1, ..]`, bidirectional `[forward, backward, lstm1, ..]`,
/// encoder-decoder `[encoder, decoder]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub layers: Vec<LstmLayerParams>,
    pub head: Dense,
}

impl ModelParams {
    pub fn zeros(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .lstm_shapes()
            .into_iter()
            .map(|(i, h)| LstmLayerParams::zeros(i, h))
            .collect::<Result<_>>()?;
        let (o, i) = spec.head_shape();
        Ok(Self {
            layers,
            head: Dense::zeros(o, i)?,
        })
    }

    pub fn init(spec: &ModelSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .lstm_shapes()
            .into_iter()
            .map(|(i, h)| LstmLayerParams::init(i, h, rng))
            .collect::<Result<_>>()?;
        let (o, i) = spec.head_shape();
        Ok(Self {
            layers,
            head: Dense::init(o, i, rng)?,
        })
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = self.layers.iter().flat_map(LstmLayerParams::slices).collect();
        out.push(self.head.w.as_slice());
        out.push(self.head.b.as_slice());
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = self
            .layers
            .iter_mut()
            .flat_map(LstmLayerParams::slices_mut)
            .collect();
        out.push(self.head.w.as_mut_slice());
        out.push(self.head.b.as_mut_slice());
        out
    }

    /// Tensor names aligned with [`ModelParams::slices`].
    pub fn tensor_names(&self, spec: &ModelSpec) -> Vec<String> {
        let mut names = Vec::new();
        for layer in spec.layer_names() {
            for kind in ["U", "W", "b"] {
                for g in GATE_NAMES {
                    names.push(format!("{layer}.{kind}_{g}"));
                }
            }
        }
        names.push("head.W".into());
        names.push("head.b".into());
        names
    }

    pub fn parameter_count(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    /// Checks that `self` has exactly the tensors `spec` calls for.
    pub fn check_against(&self, spec: &ModelSpec) -> Result<()> {
        let shapes = spec.lstm_shapes();
        if shapes.len() != self.layers.len() {
            return Err(Error::shape("model layers", shapes.len(), self.layers.len()));
        }
        for (l, &(input, hidden)) in self.layers.iter().zip(&shapes) {
            let ok = l.input_size == input
                && l.hidden == hidden
                && l.u.iter().all(|m| m.shape() == (hidden, input))
                && l.w.iter().all(|m| m.shape() == (hidden, hidden))
                && l.b.iter().all(|v| v.len() == hidden);
            if !ok {
                return Err(Error::shape(
                    "lstm layer",
                    format!("{input}->{hidden}"),
                    format!("{}->{}", l.input_size, l.hidden),
                ));
            }
        }
        let (o, i) = spec.head_shape();
        if self.head.w.shape() != (o, i) || self.head.b.len() != o {
            return Err(Error::shape(
                "dense head",
                format!("{o}x{i}"),
                format!("{:?} + {}", self.head.w.shape(), self.head.b.len()),
            ));
        }
        Ok(())
    }
}

/// Gradients, one tensor per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet(pub ModelParams);

impl GradientSet {
    pub fn zeros_like(params: &ModelParams) -> Self {
        let mut g = params.clone();
        for s in g.slices_mut() {
            s.fill(0.0);
        }
        Self(g)
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.0.slices()
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.0.slices_mut()
    }

    pub fn add_assign(&mut self, other: &GradientSet) -> Result<()> {
        let theirs = other.slices();
        let mine = self.slices_mut();
        if mine.len() != theirs.len() {
            return Err(Error::shape("gradient accumulation", mine.len(), theirs.len()));
        }
        for (a, b) in mine.into_iter().zip(theirs) {
            if a.len() != b.len() {
                return Err(Error::shape("gradient accumulation", a.len(), b.len()));
            }
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for s in self.slices_mut() {
            for x in s.iter_mut() {
                *x *= factor;
            }
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .fold(0.0, |m, x| m.max(x.abs()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vector,
    pub c: Vector,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Result<Self> {
        Ok(Self {
            h: Vector::zeros(hidden)?,
            c: Vector::zeros(hidden)?,
        })
    }
}

/// One LSTM step.
pub fn lstm_cell_forward(
    x: &Vector,
    prev: &LstmState,
    p: &LstmLayerParams,
    formula: CellFormula,
) -> Result<LstmState> {
    if x.len() != p.input_size {
        return Err(Error::shape("lstm_cell_forward input", p.input_size, x.len()));
    }
    if prev.h.len() != p.hidden || prev.c.len() != p.hidden {
        return Err(Error::shape(
            "lstm_cell_forward state",
            p.hidden,
            format!("h {} / c {}", prev.h.len(), prev.c.len()),
        ));
    }
    let step = step_forward(p, x.as_slice(), prev.h.as_slice(), prev.c.as_slice(), formula);
    Ok(LstmState {
        h: Vector::new(step.h().to_vec())?,
        c: Vector::new(step.c().to_vec())?,
    })
}

/// Activations of one step, kept for the backward pass. Everything lives in
/// one buffer laid out as `x | h_prev | c_prev | i f o c̃ | c | tanh c | h`.
#[derive(Debug, Clone)]
struct StepCache {
    input: usize,
    hidden: usize,
    buf: Vec<f64>,
}

impl StepCache {
    fn at(&self, slot: usize) -> &[f64] {
        let o = self.input + slot * self.hidden;
        &self.buf[o..o + self.hidden]
    }

    fn x(&self) -> &[f64] {
        &self.buf[..self.input]
    }

    fn h_prev(&self) -> &[f64] {
        self.at(0)
    }

    fn c_prev(&self) -> &[f64] {
        self.at(1)
    }

    /// Post-activation value of gate `g`.
    fn gate(&self, g: usize) -> &[f64] {
        self.at(2 + g)
    }

    fn c(&self) -> &[f64] {
        self.at(6)
    }

    fn tanh_c(&self) -> &[f64] {
        self.at(7)
    }

    fn h(&self) -> &[f64] {
        self.at(8)
    }
}

fn step_forward(p: &LstmLayerParams, x: &[f64], h_prev: &[f64], c_prev: &[f64], formula: CellFormula) -> StepCache {
    let (m, n) = (p.input_size, p.hidden);
    let mut buf = vec![0.0; m + 9 * n];
    let (inputs, rest) = buf.split_at_mut(m + 2 * n);
    inputs[..m].copy_from_slice(x);
    inputs[m..m + n].copy_from_slice(h_prev);
    inputs[m + n..].copy_from_slice(c_prev);
    let (gates, rest) = rest.split_at_mut(4 * n);
    for (g, a) in gates.chunks_exact_mut(n).enumerate() {
        a.copy_from_slice(p.b[g].as_slice());
        matvec_acc(p.u[g].as_slice(), m, x, a);
        matvec_acc(p.w[g].as_slice(), n, h_prev, a);
        if g == GATE_CANDIDATE {
            tanh_in_place(a);
        } else {
            sigmoid_in_place(a);
        }
    }
    let (c, rest) = rest.split_at_mut(n);
    let (tanh_c, h) = rest.split_at_mut(n);
    let (gi, rest) = gates.split_at(n);
    let (gf, rest) = rest.split_at(n);
    let (go, gc) = rest.split_at(n);
    for k in 0..n {
        c[k] = gf[k] * c_prev[k] + gi[k] * gc[k];
    }
    if formula == CellFormula::Squashed {
        sigmoid_in_place(c);
    }
    tanh_c.copy_from_slice(c);
    tanh_in_place(tanh_c);
    for k in 0..n {
        h[k] = tanh_c[k] * go[k];
    }
    StepCache { input: m, hidden: n, buf }
}

/// One layer unrolled over a sequence from a given initial state.
#[derive(Debug, Clone)]
struct LayerCache {
    steps: Vec<StepCache>,
}

impl LayerCache {
    fn outputs(&self) -> impl Iterator<Item = &[f64]> {
        self.steps.iter().map(StepCache::h)
    }

    fn last(&self) -> &StepCache {
        self.steps.last().expect("non-empty sequence")
    }
}

fn run_layer(p: &LstmLayerParams, xs: &[Vec<f64>], h0: &[f64], c0: &[f64], formula: CellFormula) -> LayerCache {
    let mut steps: Vec<StepCache> = Vec::with_capacity(xs.len());
    for x in xs {
        let (h, c) = match steps.last() {
            Some(s) => (s.h(), s.c()),
            None => (h0, c0),
        };
        let next = step_forward(p, x, h, c, formula);
        steps.push(next);
    }
    LayerCache { steps }
}

/// Gradients flowing out of a layer's backward pass.
struct LayerGrad {
    dx: Vec<Vec<f64>>,
    dh0: Vec<f64>,
    dc0: Vec<f64>,
}

/// Reverse-mode through one unrolled layer. `dh[t]` is the gradient arriving
/// at `h_t` from outside the recurrence, `dc_last` any gradient on the final
/// cell state.
fn backprop_layer(
    p: &LstmLayerParams,
    cache: &LayerCache,
    dh: &[Vec<f64>],
    dc_last: Option<&[f64]>,
    formula: CellFormula,
    grad: &mut LstmLayerParams,
) -> LayerGrad {
    let n = p.hidden;
    let mut dh_next = vec![0.0; n];
    let mut dc_next = dc_last.map_or_else(|| vec![0.0; n], <[f64]>::to_vec);
    let mut dx = vec![Vec::new(); cache.steps.len()];
    let mut da: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; n]);

    for (t, s) in cache.steps.iter().enumerate().rev() {
        let (gi, gf, go, gc) = (s.gate(GATE_INPUT), s.gate(GATE_FORGET), s.gate(GATE_OUTPUT), s.gate(GATE_CANDIDATE));
        let (tanh_c, c, c_prev) = (s.tanh_c(), s.c(), s.c_prev());
        for k in 0..n {
            let dh_k = dh[t][k] + dh_next[k];
            let d_o = dh_k * tanh_c[k];
            let mut dc = dc_next[k] + dh_k * go[k] * (1.0 - tanh_c[k] * tanh_c[k]);
            if formula == CellFormula::Squashed {
                dc *= c[k] * (1.0 - c[k]);
            }
            let d_i = dc * gc[k];
            let d_g = dc * gi[k];
            let d_f = dc * c_prev[k];
            dc_next[k] = dc * gf[k];
            da[GATE_INPUT][k] = d_i * gi[k] * (1.0 - gi[k]);
            da[GATE_FORGET][k] = d_f * gf[k] * (1.0 - gf[k]);
            da[GATE_OUTPUT][k] = d_o * go[k] * (1.0 - go[k]);
            da[GATE_CANDIDATE][k] = d_g * (1.0 - gc[k] * gc[k]);
        }
        let mut dxt = vec![0.0; p.input_size];
        dh_next.fill(0.0);
        for g in 0..4 {
            outer_acc(grad.u[g].as_mut_slice(), &da[g], s.x());
            outer_acc(grad.w[g].as_mut_slice(), &da[g], s.h_prev());
            for (b, d) in grad.b[g].as_mut_slice().iter_mut().zip(&da[g]) {
                *b += d;
            }
            matvec_t_acc(p.u[g].as_slice(), p.input_size, &da[g], &mut dxt);
            matvec_t_acc(p.w[g].as_slice(), n, &da[g], &mut dh_next);
        }
        dx[t] = dxt;
    }
    LayerGrad {
        dx,
        dh0: dh_next,
        dc0: dc_next,
    }
}

/// Per-site multipliers for inverted dropout: 0 for dropped units,
/// `1/(1-rate)` for kept ones.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    sites: Vec<Vec<Vec<f64>>>,
}

impl DropoutMask {
    pub fn sample(spec: &ModelSpec, rng: &mut Rng) -> Self {
        let rate = spec.dropout_rate;
        let keep = if rate > 0.0 { 1.0 / (1.0 - rate) } else { 1.0 };
        let sites = spec
            .dropout_sites()
            .into_iter()
            .map(|(steps, width)| {
                (0..steps)
                    .map(|_| {
                        (0..width)
                            .map(|_| if rate > 0.0 && rng.bernoulli(rate) { 0.0 } else { keep })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Self { sites }
    }

    pub fn ones(spec: &ModelSpec) -> Self {
        let sites = spec
            .dropout_sites()
            .into_iter()
            .map(|(steps, width)| vec![vec![1.0; width]; steps])
            .collect();
        Self { sites }
    }

    fn check(&self, spec: &ModelSpec) -> Result<()> {
        let expected = spec.dropout_sites();
        let found: Vec<(usize, usize)> = self
            .sites
            .iter()
            .map(|s| (s.len(), s.first().map_or(0, Vec::len)))
            .collect();
        if expected != found {
            return Err(Error::shape("dropout mask", format!("{expected:?}"), format!("{found:?}")));
        }
        Ok(())
    }
}

fn apply_mask(xs: &[f64], mask: Option<&[f64]>) -> Vec<f64> {
    match mask {
        Some(m) => xs.iter().zip(m).map(|(x, m)| x * m).collect(),
        None => xs.to_vec(),
    }
}

fn mask_row<'a>(mask: Option<&'a DropoutMask>, site: usize, step: usize) -> Option<&'a [f64]> {
    mask.map(|m| m.sites[site][step].as_slice())
}

#[derive(Debug, Clone)]
enum Activations {
    Stacked {
        layers: Vec<LayerCache>,
        head_input: Vec<f64>,
    },
    Bidirectional {
        forward: LayerCache,
        backward: LayerCache,
        upper: Vec<LayerCache>,
        head_input: Vec<f64>,
    },
    EncoderDecoder {
        encoder: LayerCache,
        decoder: LayerCache,
        /// Masked decoder states fed to the shared head.
        head_inputs: Vec<Vec<f64>>,
    },
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    variant: Variant,
    input_shape: (usize, usize),
    mask: Option<DropoutMask>,
    activations: Activations,
    prediction: Vec<f64>,
}

impl ForwardCache {
    pub fn prediction(&self) -> &[f64] {
        &self.prediction
    }

    /// Per-step `[h_forward, h_backward]` of a bidirectional layer, or
    /// `None` for other variants.
    pub fn bidirectional_states(&self) -> Option<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        match &self.activations {
            Activations::Bidirectional { forward, backward, .. } => {
                let f = forward.outputs().map(<[f64]>::to_vec).collect();
                let mut b: Vec<Vec<f64>> = backward.outputs().map(<[f64]>::to_vec).collect();
                b.reverse();
                Some((f, b))
            }
            _ => None,
        }
    }

    /// Final cell states of every recurrent layer.
    pub fn final_cell_states(&self) -> Vec<Vec<f64>> {
        match &self.activations {
            Activations::Stacked { layers, .. } => layers.iter().map(|l| l.last().c().to_vec()).collect(),
            Activations::Bidirectional { forward, backward, upper, .. } => std::iter::once(forward)
                .chain(std::iter::once(backward))
                .chain(upper)
                .map(|l| l.last().c().to_vec())
                .collect(),
            Activations::EncoderDecoder { encoder, decoder, .. } => {
                vec![encoder.last().c().to_vec(), decoder.last().c().to_vec()]
            }
        }
    }
}

fn check_window(window: &Matrix, spec: &ModelSpec, params: &ModelParams, mask: Option<&DropoutMask>) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    if window.shape() != spec.input_shape {
        return Err(Error::shape(
            "model input window",
            format!("{:?}", spec.input_shape),
            format!("{:?}", window.shape()),
        ));
    }
    params.check_against(spec)?;
    if let Some(m) = mask {
        m.check(spec)?;
    }
    Ok((0..window.rows()).map(|t| window.row(t).to_vec()).collect())
}

fn dense_forward(head: &Dense, x: &[f64]) -> Vec<f64> {
    let mut y = head.b.as_slice().to_vec();
    matvec_acc(head.w.as_slice(), head.w.cols(), x, &mut y);
    y
}

/// Forward pass of a stacked unidirectional LSTM.
pub fn lstm_forward(
    window: &Matrix,
    spec: &ModelSpec,
    params: &ModelParams,
    mask: Option<&DropoutMask>,
) -> Result<ForwardCache> {
    if spec.variant != Variant::Plain {
        return Err(Error::InvalidArgument(format!("lstm_forward called with {} spec", spec.variant)));
    }
    let mut seq = check_window(window, spec, params, mask)?;
    let formula = spec.cell_formula;
    let mut layers = Vec::with_capacity(params.layers.len());
    for (l, p) in params.layers.iter().enumerate() {
        let zeros = vec![0.0; p.hidden];
        let cache = run_layer(p, &seq, &zeros, &zeros, formula);
        seq = cache
            .outputs()
            .enumerate()
            .map(|(t, h)| apply_mask(h, mask_row(mask, l, t)))
            .collect();
        layers.push(cache);
    }
    let head_input = seq.last().expect("non-empty window").clone();
    let prediction = dense_forward(&params.head, &head_input);
    Ok(ForwardCache {
        variant: Variant::Plain,
        input_shape: spec.input_shape,
        mask: mask.cloned(),
        activations: Activations::Stacked {
            layers,
            head_input,
        },
        prediction,
    })
}

/// Forward pass of the bidirectional model. Without upper layers the head
/// reads the two final states `[h_fwd(D), h_bwd(1)]`.
pub fn bdlstm_forward(
    window: &Matrix,
    spec: &ModelSpec,
    params: &ModelParams,
    mask: Option<&DropoutMask>,
) -> Result<ForwardCache> {
    if spec.variant != Variant::Bidirectional {
        return Err(Error::InvalidArgument(format!("bdlstm_forward called with {} spec", spec.variant)));
    }
    let seq = check_window(window, spec, params, mask)?;
    let formula = spec.cell_formula;
    let d = seq.len();
    let (pf, pb) = (&params.layers[0], &params.layers[1]);
    let zeros = vec![0.0; pf.hidden];
    let forward = run_layer(pf, &seq, &zeros, &zeros, formula);
    let reversed: Vec<Vec<f64>> = seq.iter().rev().cloned().collect();
    let backward = run_layer(pb, &reversed, &zeros, &zeros, formula);

    let concat: Vec<Vec<f64>> = (0..d)
        .map(|t| {
            let mut v = forward.steps[t].h().to_vec();
            v.extend_from_slice(backward.steps[d - 1 - t].h());
            apply_mask(&v, mask_row(mask, 0, t))
        })
        .collect();

    let mut upper = Vec::new();
    let head_input = if params.layers.len() == 2 {
        let n = pf.hidden;
        let mut v = concat[d - 1][..n].to_vec();
        v.extend_from_slice(&concat[0][n..]);
        v
    } else {
        let mut seq = concat.clone();
        for (k, p) in params.layers[2..].iter().enumerate() {
            let zeros = vec![0.0; p.hidden];
            let cache = run_layer(p, &seq, &zeros, &zeros, formula);
            seq = cache
                .outputs()
                .enumerate()
                .map(|(t, h)| apply_mask(h, mask_row(mask, k + 1, t)))
                .collect();
            upper.push(cache);
        }
        seq.last().expect("non-empty").clone()
    };
    let prediction = dense_forward(&params.head, &head_input);
    Ok(ForwardCache {
        variant: Variant::Bidirectional,
        input_shape: spec.input_shape,
        mask: mask.cloned(),
        activations: Activations::Bidirectional {
            forward,
            backward,
            upper,
            head_input,
        },
        prediction,
    })
}

/// Forward pass of the encoder-decoder model.
pub fn edlstm_forward(
    window: &Matrix,
    spec: &ModelSpec,
    params: &ModelParams,
    mask: Option<&DropoutMask>,
) -> Result<ForwardCache> {
    if spec.variant != Variant::EncoderDecoder {
        return Err(Error::InvalidArgument(format!("edlstm_forward called with {} spec", spec.variant)));
    }
    let seq = check_window(window, spec, params, mask)?;
    let formula = spec.cell_formula;
    let (pe, pd) = (&params.layers[0], &params.layers[1]);
    let zeros = vec![0.0; pe.hidden];
    let encoder = run_layer(pe, &seq, &zeros, &zeros, formula);
    let last = encoder.last();
    let context = apply_mask(last.h(), mask_row(mask, 0, 0));
    let dec_inputs = vec![context; spec.horizons];
    let decoder = run_layer(pd, &dec_inputs, last.h(), last.c(), formula);
    let head_inputs: Vec<Vec<f64>> = decoder
        .outputs()
        .enumerate()
        .map(|(k, h)| apply_mask(h, mask_row(mask, 1, k)))
        .collect();
    let w = params.head.w.row(0);
    let b = params.head.b[0];
    let prediction = head_inputs.iter().map(|h| dot(w, h) + b).collect();
    Ok(ForwardCache {
        variant: Variant::EncoderDecoder,
        input_shape: spec.input_shape,
        mask: mask.cloned(),
        activations: Activations::EncoderDecoder {
            encoder,
            decoder,
            head_inputs,
        },
        prediction,
    })
}

/// Dispatches on `spec.variant`.
pub fn forward(window: &Matrix, spec: &ModelSpec, params: &ModelParams, mask: Option<&DropoutMask>) -> Result<ForwardCache> {
    match spec.variant {
        Variant::Plain => lstm_forward(window, spec, params, mask),
        Variant::Bidirectional => bdlstm_forward(window, spec, params, mask),
        Variant::EncoderDecoder => edlstm_forward(window, spec, params, mask),
    }
}

/// Mean squared error of the cached prediction against `target`.
pub fn loss(cache: &ForwardCache, target: &[f64]) -> Result<f64> {
    if target.len() != cache.prediction.len() {
        return Err(Error::shape("loss target", cache.prediction.len(), target.len()));
    }
    let m = target.len() as f64;
    Ok(cache
        .prediction
        .iter()
        .zip(target)
        .map(|(p, y)| (p - y) * (p - y))
        .sum::<f64>()
        / m)
}

/// Gradient of the mean squared error with respect to every parameter.
pub fn backward(cache: &ForwardCache, target: &[f64], spec: &ModelSpec, params: &ModelParams) -> Result<GradientSet> {
    let mut grad = GradientSet::zeros_like(params);
    backward_into(cache, target, spec, params, &mut grad)?;
    Ok(grad)
}

/// Like [`backward`] but adds the gradient into `grad`.
pub fn backward_into(
    cache: &ForwardCache,
    target: &[f64],
    spec: &ModelSpec,
    params: &ModelParams,
    grad: &mut GradientSet,
) -> Result<()> {
    if cache.variant != spec.variant || cache.input_shape != spec.input_shape {
        return Err(Error::shape(
            "forward cache",
            format!("{} {:?}", spec.variant, spec.input_shape),
            format!("{} {:?}", cache.variant, cache.input_shape),
        ));
    }
    if target.len() != spec.horizons || cache.prediction.len() != spec.horizons {
        return Err(Error::shape("backward target", spec.horizons, target.len()));
    }
    params.check_against(spec)?;
    grad.0.check_against(spec)?;
    let m = spec.horizons as f64;
    let dy: Vec<f64> = cache
        .prediction
        .iter()
        .zip(target)
        .map(|(p, y)| 2.0 * (p - y) / m)
        .collect();
    let formula = spec.cell_formula;
    let mask = cache.mask.as_ref();
    let g = &mut grad.0;

    match &cache.activations {
        Activations::Stacked {
            layers,
            head_input,
        } => {
            let d_head = dense_backward(&params.head, &mut g.head, &dy, head_input);
            let steps = cache.input_shape.0;
            let mut d_out = vec![vec![0.0; d_head.len()]; steps];
            d_out[steps - 1] = d_head;
            for l in (0..layers.len()).rev() {
                let dh = masked_grads(&d_out, mask, l);
                let lg = backprop_layer(&params.layers[l], &layers[l], &dh, None, formula, &mut g.layers[l]);
                d_out = lg.dx;
            }
        }
        Activations::Bidirectional {
            forward,
            backward: bwd,
            upper,
            head_input,
        } => {
            let d_head = dense_backward(&params.head, &mut g.head, &dy, head_input);
            let steps = cache.input_shape.0;
            let n = params.layers[0].hidden;
            let mut d_concat = vec![vec![0.0; 2 * n]; steps];
            if upper.is_empty() {
                d_concat[steps - 1][..n].copy_from_slice(&d_head[..n]);
                d_concat[0][n..].copy_from_slice(&d_head[n..]);
            } else {
                let mut d_out = vec![vec![0.0; d_head.len()]; steps];
                d_out[steps - 1] = d_head;
                for k in (0..upper.len()).rev() {
                    let dh = masked_grads(&d_out, mask, k + 1);
                    let lg = backprop_layer(&params.layers[k + 2], &upper[k], &dh, None, formula, &mut g.layers[k + 2]);
                    d_out = lg.dx;
                }
                d_concat = d_out;
            }
            let d_concat = masked_grads(&d_concat, mask, 0);
            let dh_f: Vec<Vec<f64>> = d_concat.iter().map(|v| v[..n].to_vec()).collect();
            // Backward layer step s saw original time D-1-s.
            let dh_b: Vec<Vec<f64>> = d_concat.iter().rev().map(|v| v[n..].to_vec()).collect();
            let (gf, rest) = g.layers.split_at_mut(1);
            backprop_layer(&params.layers[0], forward, &dh_f, None, formula, &mut gf[0]);
            backprop_layer(&params.layers[1], bwd, &dh_b, None, formula, &mut rest[0]);
        }
        Activations::EncoderDecoder {
            encoder,
            decoder,
            head_inputs,
        } => {
            let w = params.head.w.row(0).to_vec();
            let n = w.len();
            let mut d_dec = Vec::with_capacity(head_inputs.len());
            for (k, h) in head_inputs.iter().enumerate() {
                let gw = g.head.w.as_mut_slice();
                for j in 0..n {
                    gw[j] += dy[k] * h[j];
                }
                g.head.b.as_mut_slice()[0] += dy[k];
                d_dec.push(w.iter().map(|wj| wj * dy[k]).collect::<Vec<f64>>());
            }
            let dh_dec = masked_grads(&d_dec, mask, 1);
            let (ge, gd) = g.layers.split_at_mut(1);
            let lg = backprop_layer(&params.layers[1], decoder, &dh_dec, None, formula, &mut gd[0]);
            let mut d_context = vec![0.0; n];
            for dx in &lg.dx {
                for (a, b) in d_context.iter_mut().zip(dx) {
                    *a += b;
                }
            }
            let d_context = apply_mask(&d_context, mask_row(mask, 0, 0));
            let steps = cache.input_shape.0;
            let mut dh_enc = vec![vec![0.0; n]; steps];
            dh_enc[steps - 1] = d_context.iter().zip(&lg.dh0).map(|(a, b)| a + b).collect();
            backprop_layer(&params.layers[0], encoder, &dh_enc, Some(&lg.dc0), formula, &mut ge[0]);
        }
    }
    Ok(())
}

fn dense_backward(head: &Dense, grad: &mut Dense, dy: &[f64], x: &[f64]) -> Vec<f64> {
    outer_acc(grad.w.as_mut_slice(), dy, x);
    for (b, d) in grad.b.as_mut_slice().iter_mut().zip(dy) {
        *b += d;
    }
    let mut dx = vec![0.0; x.len()];
    matvec_t_acc(head.w.as_slice(), head.w.cols(), dy, &mut dx);
    dx
}

fn masked_grads(d: &[Vec<f64>], mask: Option<&DropoutMask>, site: usize) -> Vec<Vec<f64>> {
    d.iter()
        .enumerate()
        .map(|(t, v)| apply_mask(v, mask_row(mask, site, t)))
        .collect()
}

/// Anything that maps a `D × F` window to `horizons` forecast values.
pub trait Predictor {
    fn input_shape(&self) -> (usize, usize);
    fn horizons(&self) -> usize;
    fn predict(&self, window: &Matrix) -> Result<Vec<f64>>;
}

/// A spec with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ModelParams,
}

impl Model {
    pub fn new(spec: ModelSpec, params: ModelParams) -> Result<Self> {
        params.check_against(&spec)?;
        Ok(Self { spec, params })
    }

    pub fn init(spec: ModelSpec, rng: &mut Rng) -> Result<Self> {
        let params = ModelParams::init(&spec, rng)?;
        Ok(Self { spec, params })
    }

    pub fn forward(&self, window: &Matrix, mask: Option<&DropoutMask>) -> Result<ForwardCache> {
        forward(window, &self.spec, &self.params, mask)
    }
}

impl Predictor for Model {
    fn input_shape(&self) -> (usize, usize) {
        self.spec.input_shape
    }

    fn horizons(&self) -> usize {
        self.spec.horizons
    }

    fn predict(&self, window: &Matrix) -> Result<Vec<f64>> {
        Ok(self.forward(window, None)?.prediction)
    }
}
