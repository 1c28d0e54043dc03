//! Dense linear algebra, activations, and the seeded generator used
//! throughout the crate.
//!
//! Everything is `f64`. The hot loops in [`crate::models`] work on raw
//! slices through the `*_into` / `*_acc` helpers below; [`Matrix`] and
//! [`Vector`] are the owned containers that cross module boundaries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for Matrix {
    type Error = Error;
    fn try_from(raw: RawMatrix) -> Result<Self> {
        Matrix::from_vec(raw.rows, raw.cols, raw.data)
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        Ok(Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        })
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{} values for {rows}x{cols}", rows * cols),
                data.len(),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::shape("Matrix::from_rows", cols, bad.len()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut m = Self::zeros(n, n)?;
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }
}

/// Dense real vector with at least one element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Vector(Vec<f64>);

impl TryFrom<Vec<f64>> for Vector {
    type Error = Error;
    fn try_from(data: Vec<f64>) -> Result<Self> {
        Vector::new(data)
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Self {
        v.0
    }
}

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("vector must be non-empty".into()));
        }
        Ok(Self(data))
    }

    pub fn zeros(len: usize) -> Result<Self> {
        Self::new(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self(self.0.iter().map(|&x| f(x)).collect())
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// `m · v`.
pub fn matvec(m: &Matrix, v: &Vector) -> Result<Vector> {
    if m.cols != v.len() {
        return Err(Error::shape(
            "matvec",
            format!("vector of length {} for {}x{} matrix", m.cols, m.rows, m.cols),
            format!("length {}", v.len()),
        ));
    }
    let mut out = vec![0.0; m.rows];
    matvec_acc(&m.data, m.cols, v.as_slice(), &mut out);
    Ok(Vector(out))
}

pub fn sigmoid(v: &Vector) -> Vector {
    v.map(sigmoid_scalar)
}

pub fn tanh_act(v: &Vector) -> Vector {
    v.map(f64::tanh)
}

/// Logistic function, evaluated on the branch that cannot overflow.
#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Matrix with entries drawn i.i.d. from `U[-bound, bound]`.
pub fn init_uniform(rng: &mut Rng, rows: usize, cols: usize, bound: f64) -> Result<Matrix> {
    if !(bound > 0.0) || !bound.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "initialisation bound must be positive and finite, got {bound}"
        )));
    }
    let mut m = Matrix::zeros(rows, cols)?;
    for x in m.data.iter_mut() {
        *x = rng.uniform(-bound, bound);
    }
    Ok(m)
}

// Slice kernels. Callers guarantee the shapes.

/// `e^x` without branches so slice loops vectorise: Cody-Waite reduction to
/// `|r| <= ln2/2`, a degree-13 Taylor polynomial and an exponent splice.
/// Inputs are clamped to `[-708, 709]`, which keeps the result normal and
/// finite; inside that range it agrees with `f64::exp` to a few ulp.
#[inline(always)]
pub(crate) fn exp_fast(x: f64) -> f64 {
    // 1.5 * 2^52: adding it rounds to an integer held in the low mantissa bits.
    const SHIFT: f64 = 6_755_399_441_055_744.0;
    const LN2_HI: f64 = 6.931_471_803_691_238_164_90e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;
    const INV_FACT: [f64; 14] = [
        1.0,
        1.0,
        1.0 / 2.0,
        1.0 / 6.0,
        1.0 / 24.0,
        1.0 / 120.0,
        1.0 / 720.0,
        1.0 / 5_040.0,
        1.0 / 40_320.0,
        1.0 / 362_880.0,
        1.0 / 3_628_800.0,
        1.0 / 39_916_800.0,
        1.0 / 479_001_600.0,
        1.0 / 6_227_020_800.0,
    ];
    let x = x.max(-708.0).min(709.0);
    let t = x * std::f64::consts::LOG2_E + SHIFT;
    let n = t - SHIFT;
    let r = (x - n * LN2_HI) - n * LN2_LO;
    let mut p = INV_FACT[13];
    for c in INV_FACT[..13].iter().rev() {
        p = p * r + c;
    }
    let k = t.to_bits().wrapping_sub(SHIFT.to_bits());
    p * f64::from_bits(k.wrapping_add(1023) << 52)
}

/// Logistic function on top of [`exp_fast`].
#[inline(always)]
pub(crate) fn sigmoid_fast(x: f64) -> f64 {
    1.0 / (1.0 + exp_fast(-x))
}

/// `tanh` on top of [`exp_fast`]; absolute error stays at the 1e-16 level.
#[inline(always)]
pub(crate) fn tanh_fast(x: f64) -> f64 {
    let e = exp_fast(-2.0 * x.abs());
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

pub(crate) fn sigmoid_in_place(v: &mut [f64]) {
    for x in v.iter_mut() {
        *x = sigmoid_fast(*x);
    }
}

pub(crate) fn tanh_in_place(v: &mut [f64]) {
    for x in v.iter_mut() {
        *x = tanh_fast(*x);
    }
}

/// `out += W · x` with `W` row-major of width `cols`.
#[inline]
pub(crate) fn matvec_acc(w: &[f64], cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), cols * out.len());
    debug_assert_eq!(x.len(), cols);
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o += dot(row, x);
    }
}

/// `out += Wᵀ · d`, four rows of `W` per pass over `out`.
#[inline]
pub(crate) fn matvec_t_acc(w: &[f64], cols: usize, d: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), cols * d.len());
    debug_assert_eq!(out.len(), cols);
    let out = &mut out[..cols];
    let mut rows = w.chunks_exact(4 * cols);
    let mut ds = d.chunks_exact(4);
    for (block, dd) in (&mut rows).zip(&mut ds) {
        let (r0, rest) = block.split_at(cols);
        let (r1, rest) = rest.split_at(cols);
        let (r2, r3) = rest.split_at(cols);
        for j in 0..cols {
            out[j] += (dd[0] * r0[j] + dd[1] * r1[j]) + (dd[2] * r2[j] + dd[3] * r3[j]);
        }
    }
    for (&di, row) in ds.remainder().iter().zip(rows.remainder().chunks_exact(cols)) {
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += di * wij;
        }
    }
}

/// `G += d ⊗ x`.
#[inline]
pub(crate) fn outer_acc(g: &mut [f64], d: &[f64], x: &[f64]) {
    debug_assert_eq!(g.len(), d.len() * x.len());
    for (&di, row) in d.iter().zip(g.chunks_exact_mut(x.len())) {
        if di != 0.0 {
            for (gij, &xj) in row.iter_mut().zip(x) {
                *gij += di * xj;
            }
        }
    }
}

/// Dot product over eight independent lanes so the loop vectorises.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// xoshiro256** seeded through SplitMix64.
///
/// The state is expanded from the 64-bit seed with four SplitMix64 outputs,
/// exactly as recommended by the xoshiro authors, so a seed yields the same
/// stream on every platform. Floats use the top 53 bits of each output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    seed: u64,
    state: [u64; 4],
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let mut state = [0u64; 4];
        for s in state.iter_mut() {
            *s = splitmix64(&mut sm);
        }
        Self { seed, state }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform on `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `[lo, hi]` (the upper end is reachable only through rounding).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `0..n` by rejection, free of modulo bias.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "Rng::below requires n > 0");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
