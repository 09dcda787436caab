//! Minimal neural-network building blocks: dense stacks applied row-wise,
//! reverse-mode gradients for the fixed topology the model needs, max/mean
//! pooling over points, and Adam. No hidden global state anywhere; every
//! forward is deterministic.

use ndarray::{Array1, Array2, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element type of the network: f32 for training speed, f64 for the
/// gradient-check harness.
pub trait Scalar:
    ndarray::NdFloat + Serialize + for<'de> Deserialize<'de> + Default + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Row-major dense matrix, rows = points / batch entries.
pub type Tensor2D<F> = Array2<F>;

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    None,
    Relu,
    LeakyRelu,
    Tanh,
}

impl Activation {
    fn apply<F: Scalar>(&self, x: F) -> F {
        match self {
            Activation::None => x,
            Activation::Relu => {
                if x > F::zero() {
                    x
                } else {
                    F::zero()
                }
            }
            Activation::LeakyRelu => {
                if x > F::zero() {
                    x
                } else {
                    x * F::from_f64(LEAKY_SLOPE)
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative as a function of the pre-activation value.
    fn derivative<F: Scalar>(&self, pre: F) -> F {
        match self {
            Activation::None => F::one(),
            Activation::Relu => {
                if pre > F::zero() {
                    F::one()
                } else {
                    F::zero()
                }
            }
            Activation::LeakyRelu => {
                if pre > F::zero() {
                    F::one()
                } else {
                    F::from_f64(LEAKY_SLOPE)
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                F::one() - t * t
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct DenseLayer<F: Scalar> {
    /// fan_in x fan_out.
    pub weights: Array2<F>,
    pub bias: Array1<F>,
    pub activation: Activation,
}

/// A stack of dense layers applied row-wise, i.e. an MLP shared across all
/// rows of the input.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct MlpStack<F: Scalar> {
    pub layers: Vec<DenseLayer<F>>,
}

/// Cached per-layer inputs and pre-activations from a forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache<F: Scalar> {
    inputs: Vec<Array2<F>>,
    preacts: Vec<Array2<F>>,
}

/// Parameter gradients mirroring the stack's layout.
#[derive(Debug, Clone)]
pub struct MlpGrads<F: Scalar> {
    pub d_weights: Vec<Array2<F>>,
    pub d_bias: Vec<Array1<F>>,
}

impl<F: Scalar> MlpGrads<F> {
    pub fn zeros_like(stack: &MlpStack<F>) -> Self {
        Self {
            d_weights: stack
                .layers
                .iter()
                .map(|l| Array2::zeros(l.weights.raw_dim()))
                .collect(),
            d_bias: stack
                .layers
                .iter()
                .map(|l| Array1::zeros(l.bias.raw_dim()))
                .collect(),
        }
    }

    pub fn accumulate(&mut self, other: &Self) {
        for (a, b) in self.d_weights.iter_mut().zip(other.d_weights.iter()) {
            *a += b;
        }
        for (a, b) in self.d_bias.iter_mut().zip(other.d_bias.iter()) {
            *a += b;
        }
    }
}

impl<F: Scalar> MlpStack<F> {
    /// Builds a stack from consecutive widths. Weights are uniform in
    /// +-sqrt(6 / (fan_in + fan_out)) drawn from a per-layer seed; biases
    /// start at zero.
    pub fn new(widths: &[usize], activations: &[Activation], seed: u64) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidSpec("need at least one layer".into()));
        }
        if activations.len() != widths.len() - 1 {
            return Err(Error::InvalidSpec(format!(
                "{} activations for {} layers",
                activations.len(),
                widths.len() - 1
            )));
        }
        let layers = widths
            .windows(2)
            .zip(activations.iter())
            .enumerate()
            .map(|(idx, (w, act))| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(
                    seed.wrapping_add((idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
                );
                let weights = Array2::from_shape_fn((fan_in, fan_out), |_| {
                    F::from_f64(rng.random_range(-limit..limit))
                });
                DenseLayer {
                    weights,
                    bias: Array1::zeros(fan_out),
                    activation: *act,
                }
            })
            .collect();
        Ok(Self { layers })
    }

    /// Uniform activation on every layer except the last, which gets `last`.
    pub fn with_output(
        widths: &[usize],
        hidden: Activation,
        last: Activation,
        seed: u64,
    ) -> Result<Self> {
        let n = widths.len() - 1;
        let mut acts = vec![hidden; n];
        if n > 0 {
            acts[n - 1] = last;
        }
        Self::new(widths, &acts, seed)
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].weights.nrows()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().expect("non-empty").weights.ncols()
    }

    /// Zeroes the final layer's weights and bias, so the stack maps
    /// everything to zero regardless of its input.
    pub fn zero_final_layer(&mut self) {
        let last = self.layers.last_mut().expect("non-empty");
        last.weights.fill(F::zero());
        last.bias.fill(F::zero());
    }

    pub fn forward(&self, input: &Tensor2D<F>) -> Result<(Tensor2D<F>, MlpCache<F>)> {
        if input.ncols() != self.input_width() {
            return Err(Error::ShapeMismatch(format!(
                "input width {} != first layer fan_in {}",
                input.ncols(),
                self.input_width()
            )));
        }
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(self.layers.len()),
            preacts: Vec::with_capacity(self.layers.len()),
        };
        let mut x = input.clone();
        for layer in &self.layers {
            let mut pre = x.dot(&layer.weights);
            pre += &layer.bias;
            cache.inputs.push(x);
            let out = pre.mapv(|v| layer.activation.apply(v));
            cache.preacts.push(pre);
            x = out;
        }
        Ok((x, cache))
    }

    /// Exact reverse-mode gradients of the cached forward. Returns parameter
    /// gradients and the gradient w.r.t. the stack input.
    pub fn backward(&self, cache: &MlpCache<F>, upstream: &Tensor2D<F>) -> Result<(MlpGrads<F>, Tensor2D<F>)> {
        if cache.inputs.len() != self.layers.len() {
            return Err(Error::ShapeMismatch("forward cache missing".into()));
        }
        let mut grads = MlpGrads {
            d_weights: Vec::with_capacity(self.layers.len()),
            d_bias: Vec::with_capacity(self.layers.len()),
        };
        let mut d = upstream.clone();
        for (layer, (x, pre)) in self
            .layers
            .iter()
            .zip(cache.inputs.iter().zip(cache.preacts.iter()))
            .rev()
        {
            let mut dpre = d;
            dpre.zip_mut_with(pre, |g, &p| *g = *g * layer.activation.derivative(p));
            grads.d_weights.push(x.t().dot(&dpre));
            grads.d_bias.push(dpre.sum_axis(Axis(0)));
            d = dpre.dot(&layer.weights.t());
        }
        grads.d_weights.reverse();
        grads.d_bias.reverse();
        Ok((grads, d))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Max,
    Mean,
}

/// Column-wise pooling of per-point features into one cloud-level vector.
/// For max pooling the argmax rows are recorded for the backward pass
/// (lowest index wins ties).
#[derive(Debug, Clone)]
pub struct PoolResult<F: Scalar> {
    pub pooled: Array1<F>,
    pub argmax: Vec<usize>,
    pub n_rows: usize,
    pub kind: PoolKind,
}

pub fn pool_features<F: Scalar>(features: &Tensor2D<F>, kind: PoolKind) -> Result<PoolResult<F>> {
    let n = features.nrows();
    if n == 0 {
        return Err(Error::EmptyCloud);
    }
    match kind {
        PoolKind::Max => {
            let mut pooled = features.row(0).to_owned();
            let mut argmax = vec![0usize; features.ncols()];
            for (i, row) in features.rows().into_iter().enumerate().skip(1) {
                for (c, &v) in row.iter().enumerate() {
                    if v > pooled[c] {
                        pooled[c] = v;
                        argmax[c] = i;
                    }
                }
            }
            Ok(PoolResult {
                pooled,
                argmax,
                n_rows: n,
                kind,
            })
        }
        PoolKind::Mean => {
            let inv = F::from_f64(1.0 / n as f64);
            let pooled = features.sum_axis(Axis(0)).mapv(|v| v * inv);
            Ok(PoolResult {
                pooled,
                argmax: Vec::new(),
                n_rows: n,
                kind,
            })
        }
    }
}

/// Routes the pooled-vector gradient back to the feature rows.
pub fn pool_backward<F: Scalar>(result: &PoolResult<F>, upstream: &Array1<F>) -> Tensor2D<F> {
    let cols = upstream.len();
    let mut out = Array2::zeros((result.n_rows, cols));
    match result.kind {
        PoolKind::Max => {
            for (c, &row) in result.argmax.iter().enumerate() {
                out[(row, c)] = upstream[c];
            }
        }
        PoolKind::Mean => {
            let inv = F::from_f64(1.0 / result.n_rows as f64);
            for mut row in out.rows_mut() {
                row.assign(&upstream.mapv(|v| v * inv));
            }
        }
    }
    out
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for one stack, plus the shared step count.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct AdamState<F: Scalar> {
    pub step: u64,
    m_w: Vec<Array2<F>>,
    v_w: Vec<Array2<F>>,
    m_b: Vec<Array1<F>>,
    v_b: Vec<Array1<F>>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(stack: &MlpStack<F>) -> Self {
        Self {
            step: 0,
            m_w: stack
                .layers
                .iter()
                .map(|l| Array2::zeros(l.weights.raw_dim()))
                .collect(),
            v_w: stack
                .layers
                .iter()
                .map(|l| Array2::zeros(l.weights.raw_dim()))
                .collect(),
            m_b: stack
                .layers
                .iter()
                .map(|l| Array1::zeros(l.bias.raw_dim()))
                .collect(),
            v_b: stack
                .layers
                .iter()
                .map(|l| Array1::zeros(l.bias.raw_dim()))
                .collect(),
        }
    }

    /// Canonical Adam update with bias correction; step increments by 1.
    pub fn step(&mut self, stack: &mut MlpStack<F>, grads: &MlpGrads<F>, hp: &AdamParams) -> Result<()> {
        if grads.d_weights.len() != stack.layers.len() {
            return Err(Error::ShapeMismatch("gradient/stack layer count".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = F::from_f64(hp.beta1);
        let b2 = F::from_f64(hp.beta2);
        let one = F::one();
        let bc1 = F::from_f64(1.0 - hp.beta1.powi(t));
        let bc2 = F::from_f64(1.0 - hp.beta2.powi(t));
        let lr = F::from_f64(hp.lr);
        let eps = F::from_f64(hp.eps);

        for i in 0..stack.layers.len() {
            if grads.d_weights[i].raw_dim() != stack.layers[i].weights.raw_dim() {
                return Err(Error::ShapeMismatch(format!("layer {i} weight gradient shape")));
            }
            ndarray::Zip::from(&mut stack.layers[i].weights)
                .and(&mut self.m_w[i])
                .and(&mut self.v_w[i])
                .and(&grads.d_weights[i])
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    *p = *p - lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                });
            ndarray::Zip::from(&mut stack.layers[i].bias)
                .and(&mut self.m_b[i])
                .and(&mut self.v_b[i])
                .and(&grads.d_bias[i])
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    *p = *p - lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                });
        }
        Ok(())
    }
}
