//! Minimal neural-network building blocks with explicit backward passes.
//!
//! Only what the classifier heads need is here: dense layers, batch
//! normalization, dropout, ReLU, global average pooling, concatenation and a
//! fused softmax/cross-entropy. Layers are generic over [`Scalar`] so the
//! same code runs in `f32` for training and `f64` for gradient checks.
//!
//! Each trainable layer records what its backward pass needs during
//! `forward`; calling `backward` without a recorded forward pass is an
//! error rather than a panic.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub trait Scalar: Float + FromPrimitive + ToPrimitive + Debug + Default + Sum + Send + Sync + 'static {
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("representable")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch { expected: Vec<usize>, actual: Vec<usize> },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("backward called without a recorded forward pass")]
    GraphNotRecorded,
    #[error("class index {index} out of range for {classes} classes")]
    BadTarget { index: usize, classes: usize },
}

pub type Result<T> = std::result::Result<T, NnError>;

fn mismatch(expected: &[usize], actual: &[usize]) -> NnError {
    NnError::ShapeMismatch {
        expected: expected.to_vec(),
        actual: actual.to_vec(),
    }
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NnError::ShapeMismatch {
                expected: shape,
                actual: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
        }
    }

    /// `[rows, cols]` matrix.
    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(mismatch(&[cols], &[bad.len()]));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension of a matrix.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Trailing dimension of a matrix.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-scalar tensor")
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(mismatch(&shape, &self.shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64().expect("finite")))
                .collect(),
        }
    }

    pub fn ensure_finite(self, op: &'static str) -> Result<Self> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(self)
        } else {
            Err(NnError::NonFinite(op))
        }
    }

    fn expect_matrix(&self, cols: usize) -> Result<()> {
        if self.shape.len() != 2 || self.shape[1] != cols {
            return Err(mismatch(&[self.shape.first().copied().unwrap_or(0), cols], &self.shape));
        }
        Ok(())
    }
}

/// Learned tensor plus its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<T>) -> Self {
        let n = value.len();
        debug_assert_eq!(n, shape.iter().product::<usize>());
        Self {
            name: name.into(),
            shape,
            value,
            grad: vec![T::zero(); n],
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Whether layers use batch statistics and random dropout masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout masks are drawn from a stream seeded with `seed`.
    Train { seed: u64 },
    Eval,
}

/// Mixes a base seed with a small index (splitmix64 finalizer).
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// Glorot limit `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_limit(in_dim: usize, out_dim: usize) -> f64 {
    (6.0 / (in_dim + out_dim) as f64).sqrt()
}

/// `in_dim × out_dim` matrix (row-major) of i.i.d. uniform samples on
/// `[-L, L]` with the Glorot limit `L`.
pub fn glorot_init<T: Scalar>(in_dim: usize, out_dim: usize, seed: u64) -> Vec<T> {
    assert!(in_dim > 0 && out_dim > 0, "dimensions must be positive");
    let limit = glorot_limit(in_dim, out_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..in_dim * out_dim)
        .map(|_| T::from_f64_lossy(rng.random_range(-limit..=limit)))
        .collect()
}

// ---------------------------------------------------------------------------
// Dense
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    None,
}

#[derive(Debug, Clone, PartialEq)]
struct DenseCache<T> {
    input: Tensor<T>,
    pre: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `in_dim × out_dim`, row-major.
    pub weights: Param<T>,
    pub bias: Param<T>,
    pub activation: Activation,
    cache: Option<DenseCache<T>>,
}

impl<T: Scalar> Dense<T> {
    pub fn new(name: &str, weights: Vec<T>, bias: Vec<T>, activation: Activation) -> Result<Self> {
        let out_dim = bias.len();
        if out_dim == 0 || weights.len() % out_dim != 0 {
            return Err(mismatch(&[weights.len() / out_dim.max(1), out_dim], &[weights.len()]));
        }
        let in_dim = weights.len() / out_dim;
        Ok(Self {
            in_dim,
            out_dim,
            weights: Param::new(format!("{name}/kernel"), vec![in_dim, out_dim], weights),
            bias: Param::new(format!("{name}/bias"), vec![out_dim], bias),
            activation,
            cache: None,
        })
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot(name: &str, in_dim: usize, out_dim: usize, activation: Activation, seed: u64) -> Self {
        Self::new(name, glorot_init(in_dim, out_dim, seed), vec![T::zero(); out_dim], activation)
            .expect("consistent shapes")
    }

    fn affine(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        x.expect_matrix(self.in_dim)?;
        let batch = x.rows();
        let w = &self.weights.value;
        let mut y = Vec::with_capacity(batch * self.out_dim);
        for b in 0..batch {
            let mut acc = self.bias.value.clone();
            for (i, &xi) in x.row(b).iter().enumerate() {
                if xi == T::zero() {
                    continue;
                }
                let wrow = &w[i * self.out_dim..(i + 1) * self.out_dim];
                for (a, &wij) in acc.iter_mut().zip(wrow) {
                    *a = *a + xi * wij;
                }
            }
            y.extend(acc);
        }
        Ok(y)
    }

    fn activate(&self, pre: &[T]) -> Vec<T> {
        match self.activation {
            Activation::None => pre.to_vec(),
            Activation::Relu => pre.iter().map(|&v| v.max(T::zero())).collect(),
        }
    }

    /// `act(xW + b)` without recording anything.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let pre = self.affine(x)?;
        Tensor::matrix(x.rows(), self.out_dim, self.activate(&pre))?.ensure_finite("dense")
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let pre = self.affine(x)?;
        let out = Tensor::matrix(x.rows(), self.out_dim, self.activate(&pre))?.ensure_finite("dense")?;
        self.cache = Some(DenseCache { input: x.clone(), pre });
        Ok(out)
    }

    fn grad_pre(&self, cache: &DenseCache<T>, grad_out: &Tensor<T>) -> Result<Vec<T>> {
        grad_out.expect_matrix(self.out_dim)?;
        if grad_out.rows() != cache.input.rows() {
            return Err(mismatch(&[cache.input.rows(), self.out_dim], grad_out.shape()));
        }
        Ok(match self.activation {
            Activation::None => grad_out.data().to_vec(),
            Activation::Relu => grad_out
                .data()
                .iter()
                .zip(&cache.pre)
                .map(|(&g, &p)| if p > T::zero() { g } else { T::zero() })
                .collect(),
        })
    }

    fn grad_input(&self, batch: usize, gpre: &[T]) -> Tensor<T> {
        let w = &self.weights.value;
        let mut gx = Vec::with_capacity(batch * self.in_dim);
        for b in 0..batch {
            let g = &gpre[b * self.out_dim..(b + 1) * self.out_dim];
            for i in 0..self.in_dim {
                let wrow = &w[i * self.out_dim..(i + 1) * self.out_dim];
                gx.push(wrow.iter().zip(g).fold(T::zero(), |s, (&a, &b)| s + a * b));
            }
        }
        Tensor::matrix(batch, self.in_dim, gx).expect("consistent shapes")
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or(NnError::GraphNotRecorded)?;
        let gpre = match self.grad_pre(&cache, grad_out) {
            Ok(g) => g,
            Err(e) => {
                self.cache = Some(cache);
                return Err(e);
            }
        };
        let batch = cache.input.rows();
        for b in 0..batch {
            let g = &gpre[b * self.out_dim..(b + 1) * self.out_dim];
            for (gb, &gv) in self.bias.grad.iter_mut().zip(g) {
                *gb = *gb + gv;
            }
            for (i, &xi) in cache.input.row(b).iter().enumerate() {
                if xi == T::zero() {
                    continue;
                }
                let grow = &mut self.weights.grad[i * self.out_dim..(i + 1) * self.out_dim];
                for (gw, &gv) in grow.iter_mut().zip(g) {
                    *gw = *gw + xi * gv;
                }
            }
        }
        let gx = self.grad_input(batch, &gpre);
        self.cache = Some(cache);
        Ok(gx)
    }

    /// Input gradient only; parameter gradients are left untouched.
    pub fn backward_input(&self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.as_ref().ok_or(NnError::GraphNotRecorded)?;
        let gpre = self.grad_pre(cache, grad_out)?;
        Ok(self.grad_input(cache.input.rows(), &gpre))
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.weights, &mut self.bias]
    }

    pub fn params(&self) -> [&Param<T>; 2] {
        [&self.weights, &self.bias]
    }
}

/// `act(xW + b)` for a batch of rows.
pub fn dense_forward<T: Scalar>(layer: &Dense<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    layer.apply(x)
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
struct BatchNormCache<T> {
    x_hat: Vec<T>,
    inv_std: Vec<T>,
    batch: usize,
    train: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub dim: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub epsilon: T,
    cache: Option<BatchNormCache<T>>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(name: &str, dim: usize) -> Self {
        Self {
            dim,
            gamma: Param::new(format!("{name}/gamma"), vec![dim], vec![T::one(); dim]),
            beta: Param::new(format!("{name}/beta"), vec![dim], vec![T::zero(); dim]),
            running_mean: vec![T::zero(); dim],
            running_var: vec![T::one(); dim],
            momentum: T::from_f64_lossy(0.99),
            epsilon: T::from_f64_lossy(1e-3),
            cache: None,
        }
    }

    /// Deterministic affine map using the running statistics.
    pub fn apply_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.expect_matrix(self.dim)?;
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(self.dim) {
            for (k, v) in row.iter_mut().enumerate() {
                let inv = (self.running_var[k] + self.epsilon).sqrt().recip();
                *v = self.gamma.value[k] * (*v - self.running_mean[k]) * inv + self.beta.value[k];
            }
        }
        Tensor::matrix(x.rows(), self.dim, out)?.ensure_finite("batch_norm")
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        x.expect_matrix(self.dim)?;
        let batch = x.rows();
        if mode == Mode::Eval {
            let inv_std: Vec<T> = self
                .running_var
                .iter()
                .map(|&v| (v + self.epsilon).sqrt().recip())
                .collect();
            let out = self.apply_eval(x)?;
            let x_hat = x
                .data()
                .chunks(self.dim)
                .flat_map(|row| {
                    row.iter()
                        .enumerate()
                        .map(|(k, &v)| (v - self.running_mean[k]) * inv_std[k])
                        .collect::<Vec<_>>()
                })
                .collect();
            self.cache = Some(BatchNormCache {
                x_hat,
                inv_std,
                batch,
                train: false,
            });
            return Ok(out);
        }
        let n = T::from_usize(batch).expect("batch size");
        let mut mean = vec![T::zero(); self.dim];
        for row in x.data().chunks(self.dim) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m = *m + v;
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / n);
        let mut var = vec![T::zero(); self.dim];
        for row in x.data().chunks(self.dim) {
            for k in 0..self.dim {
                let d = row[k] - mean[k];
                var[k] = var[k] + d * d;
            }
        }
        var.iter_mut().for_each(|v| *v = *v / n);
        let inv_std: Vec<T> = var.iter().map(|&v| (v + self.epsilon).sqrt().recip()).collect();
        let mut x_hat = Vec::with_capacity(x.len());
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks(self.dim) {
            for k in 0..self.dim {
                let xh = (row[k] - mean[k]) * inv_std[k];
                x_hat.push(xh);
                out.push(self.gamma.value[k] * xh + self.beta.value[k]);
            }
        }
        let m = self.momentum;
        for k in 0..self.dim {
            self.running_mean[k] = m * self.running_mean[k] + (T::one() - m) * mean[k];
            self.running_var[k] = m * self.running_var[k] + (T::one() - m) * var[k];
        }
        self.cache = Some(BatchNormCache {
            x_hat,
            inv_std,
            batch,
            train: true,
        });
        Tensor::matrix(batch, self.dim, out)?.ensure_finite("batch_norm")
    }

    fn input_grad(&self, cache: &BatchNormCache<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        grad_out.expect_matrix(self.dim)?;
        let batch = cache.batch;
        if grad_out.rows() != batch {
            return Err(mismatch(&[batch, self.dim], grad_out.shape()));
        }
        let g = grad_out.data();
        let mut gx = vec![T::zero(); g.len()];
        if !cache.train {
            for (i, v) in gx.iter_mut().enumerate() {
                let k = i % self.dim;
                *v = g[i] * self.gamma.value[k] * cache.inv_std[k];
            }
        } else {
            let n = T::from_usize(batch).expect("batch size");
            for k in 0..self.dim {
                let mut sum_g = T::zero();
                let mut sum_gx = T::zero();
                for b in 0..batch {
                    let i = b * self.dim + k;
                    sum_g = sum_g + g[i];
                    sum_gx = sum_gx + g[i] * cache.x_hat[i];
                }
                let scale = self.gamma.value[k] * cache.inv_std[k] / n;
                for b in 0..batch {
                    let i = b * self.dim + k;
                    gx[i] = scale * (n * g[i] - sum_g - cache.x_hat[i] * sum_gx);
                }
            }
        }
        Tensor::matrix(batch, self.dim, gx)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or(NnError::GraphNotRecorded)?;
        let result = self.input_grad(&cache, grad_out);
        if result.is_ok() {
            for (i, &gv) in grad_out.data().iter().enumerate() {
                let k = i % self.dim;
                self.gamma.grad[k] = self.gamma.grad[k] + gv * cache.x_hat[i];
                self.beta.grad[k] = self.beta.grad[k] + gv;
            }
        }
        self.cache = Some(cache);
        result
    }

    pub fn backward_input(&self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.as_ref().ok_or(NnError::GraphNotRecorded)?;
        self.input_grad(cache, grad_out)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.gamma, &mut self.beta]
    }

    pub fn params(&self) -> [&Param<T>; 2] {
        [&self.gamma, &self.beta]
    }
}

// ---------------------------------------------------------------------------
// Dropout and ReLU
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Dropout<T> {
    pub rate: f64,
    /// Per-element multiplier from the last forward pass: 0 or `1/(1-rate)`.
    mask: Option<Vec<T>>,
}

impl<T: Scalar> Dropout<T> {
    pub fn new(rate: f64) -> Self {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1)");
        Self { rate, mask: None }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let mask: Vec<T> = match mode {
            Mode::Train { seed } if self.rate > 0.0 => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let keep = T::from_f64_lossy(1.0 / (1.0 - self.rate));
                (0..x.len())
                    .map(|_| if rng.random::<f64>() < self.rate { T::zero() } else { keep })
                    .collect()
            }
            _ => vec![T::one(); x.len()],
        };
        let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        self.mask = Some(mask);
        Tensor {
            shape: x.shape().to_vec(),
            data,
        }
    }

    pub fn backward(&self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let mask = self.mask.as_ref().ok_or(NnError::GraphNotRecorded)?;
        if mask.len() != grad_out.len() {
            return Err(mismatch(&[mask.len()], &[grad_out.len()]));
        }
        Ok(Tensor {
            shape: grad_out.shape().to_vec(),
            data: grad_out.data().iter().zip(mask).map(|(&g, &m)| g * m).collect(),
        })
    }

    pub fn clear_cache(&mut self) {
        self.mask = None;
    }
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| v.max(T::zero())).collect(),
    }
}

/// Gradient of ReLU given its input.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    Tensor {
        shape: grad_out.shape.clone(),
        data: grad_out
            .data
            .iter()
            .zip(&input.data)
            .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
            .collect(),
    }
}

// ---------------------------------------------------------------------------
// Pooling, concatenation, softmax
// ---------------------------------------------------------------------------

/// Per-channel spatial mean. Accepts `[H, W, C]` or `[B, H, W, C]` and
/// returns `[B, C]` (with `B = 1` for an unbatched map).
pub fn global_average_pool<T: Scalar>(f: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, h, w, c) = match *f.shape() {
        [h, w, c] => (1, h, w, c),
        [b, h, w, c] => (b, h, w, c),
        _ => return Err(mismatch(&[0, 0, 0], f.shape())),
    };
    if h == 0 || w == 0 || c == 0 {
        return Err(mismatch(&[1, 1, 1], f.shape()));
    }
    let n = T::from_usize(h * w).expect("spatial size");
    let mut out = vec![T::zero(); batch * c];
    for b in 0..batch {
        let dst = &mut out[b * c..(b + 1) * c];
        for pos in f.data()[b * h * w * c..(b + 1) * h * w * c].chunks_exact(c) {
            for (d, &v) in dst.iter_mut().zip(pos) {
                *d = *d + v;
            }
        }
        dst.iter_mut().for_each(|d| *d = *d / n);
    }
    Tensor::matrix(batch, c, out)
}

/// Spreads a `[B, C]` gradient evenly back over `[B, H, W, C]`.
pub fn global_average_pool_backward<T: Scalar>(grad: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (batch, c) = (grad.rows(), grad.cols());
    let n = T::from_usize(h * w).expect("spatial size");
    let mut data = Vec::with_capacity(batch * h * w * c);
    for b in 0..batch {
        let row: Vec<T> = grad.row(b).iter().map(|&g| g / n).collect();
        for _ in 0..h * w {
            data.extend_from_slice(&row);
        }
    }
    Tensor {
        shape: vec![batch, h, w, c],
        data,
    }
}

/// Concatenates vectors in order.
pub fn concat<T: Clone>(parts: &[&[T]]) -> Vec<T> {
    parts.concat()
}

/// Row-wise concatenation of `[B, n_i]` matrices.
pub fn concat_rows<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let batch = parts.first().map_or(0, |p| p.rows());
    if let Some(bad) = parts.iter().find(|p| p.shape().len() != 2 || p.rows() != batch) {
        return Err(mismatch(&[batch, bad.cols()], bad.shape()));
    }
    let width: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(batch * width);
    for b in 0..batch {
        for p in parts {
            data.extend_from_slice(p.row(b));
        }
    }
    Tensor::matrix(batch, width, data)
}

/// Inverse of [`concat_rows`] for gradients.
pub fn split_rows<T: Scalar>(x: &Tensor<T>, widths: &[usize]) -> Result<Vec<Tensor<T>>> {
    if widths.iter().sum::<usize>() != x.cols() {
        return Err(mismatch(&[widths.iter().sum()], &[x.cols()]));
    }
    let batch = x.rows();
    let mut parts: Vec<Vec<T>> = widths.iter().map(|w| Vec::with_capacity(batch * w)).collect();
    for b in 0..batch {
        let mut off = 0;
        let row = x.row(b);
        for (p, &w) in parts.iter_mut().zip(widths) {
            p.extend_from_slice(&row[off..off + w]);
            off += w;
        }
    }
    parts
        .into_iter()
        .zip(widths)
        .map(|(d, &w)| Tensor::matrix(batch, w, d))
        .collect()
}

/// Numerically stable softmax.
pub fn softmax<T: Scalar>(z: &[T]) -> Vec<T> {
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let k = logits.cols();
    Tensor {
        shape: logits.shape.clone(),
        data: logits.data.chunks(k).flat_map(softmax).collect(),
    }
}

/// Smallest probability admitted by the cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;

/// Mean categorical cross-entropy of softmax(logits) against class indices.
///
/// Returns `(loss, probabilities, d loss / d logits)`; the gradient is
/// `(p - onehot) / batch`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<(T, Tensor<T>, Tensor<T>)> {
    let k = logits.cols();
    if logits.rows() != targets.len() {
        return Err(mismatch(&[targets.len(), k], logits.shape()));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
        return Err(NnError::BadTarget { index: bad, classes: k });
    }
    let probs = softmax_rows(logits);
    let n = T::from_usize(targets.len()).expect("batch size");
    let floor = T::from_f64_lossy(PROB_FLOOR);
    let mut loss = T::zero();
    let mut grad = probs.data.clone();
    for (b, &t) in targets.iter().enumerate() {
        loss = loss - probs.data[b * k + t].max(floor).ln();
        grad[b * k + t] = grad[b * k + t] - T::one();
    }
    grad.iter_mut().for_each(|g| *g = *g / n);
    let loss = loss / n;
    if !loss.is_finite() {
        return Err(NnError::NonFinite("cross_entropy"));
    }
    Ok((loss, probs, Tensor::matrix(targets.len(), k, grad)?))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
