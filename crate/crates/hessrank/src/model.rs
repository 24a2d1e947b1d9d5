//! Feedforward MLP definition.
//!
//! A network is a list of widths `[d, M_1, …, M_{L-1}, K]` with an elementwise
//! activation on the hidden layers (the output layer is affine) and a loss.
//! The forward pass caches everything the gradient and Hessian routines need:
//! layer activations, pre-activations, and first/second activation
//! derivatives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::linalg::{vec_row, Matrix};
use crate::scalar::{cast, cast_usize, Scalar};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    BadArchitecture(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("balanced initialization requires equal widths everywhere, got {0:?}")]
    BalancedNeedsSquare(Vec<usize>),
    #[error("layer index {index} out of range 1..={depth}")]
    LayerIndex { index: usize, depth: usize },
    #[error(transparent)]
    Linalg(#[from] crate::linalg::LinalgError),
}

/// Elementwise activation applied on hidden layers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu { slope: f64 },
    Tanh,
    Elu,
}

impl Activation {
    /// σ(z). For ReLU-family activations σ(z) = σ′(z)·z holds everywhere,
    /// including the kink, given the derivative conventions below.
    pub fn apply<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Identity => z,
            Activation::Relu => {
                if z > T::zero() {
                    z
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu { slope } => {
                if z > T::zero() {
                    z
                } else {
                    cast::<T>(slope) * z
                }
            }
            Activation::Tanh => z.tanh(),
            Activation::Elu => {
                if z > T::zero() {
                    z
                } else {
                    z.exp() - T::one()
                }
            }
        }
    }

    /// σ′(z); at z = 0 the negative-side value is used (0 for ReLU).
    pub fn prime<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Relu => {
                if z > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu { slope } => {
                if z > T::zero() {
                    T::one()
                } else {
                    cast::<T>(slope)
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                T::one() - t * t
            }
            Activation::Elu => {
                if z > T::zero() {
                    T::one()
                } else {
                    z.exp()
                }
            }
        }
    }

    /// σ″(z); zero for the piecewise-linear activations.
    pub fn second<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Identity | Activation::Relu | Activation::LeakyRelu { .. } => T::zero(),
            Activation::Tanh => {
                let t = z.tanh();
                cast::<T>(-2.0) * t * (T::one() - t * t)
            }
            Activation::Elu => {
                if z > T::zero() {
                    T::zero()
                } else {
                    z.exp()
                }
            }
        }
    }
}

/// Loss applied to the network output, averaged over the sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    CrossEntropy,
    LogCosh,
}

/// Architecture description: widths `[M_0 = d, M_1, …, M_L = K]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub use_bias: bool,
    pub loss: LossKind,
}

impl NetworkSpec {
    pub fn new(
        widths: Vec<usize>,
        activation: Activation,
        use_bias: bool,
        loss: LossKind,
    ) -> Result<Self, ModelError> {
        if widths.len() < 2 {
            return Err(ModelError::BadArchitecture(format!(
                "need at least input and output widths, got {widths:?}"
            )));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(ModelError::BadArchitecture(format!("zero width in {widths:?}")));
        }
        Ok(Self { widths, activation, use_bias, loss })
    }

    /// Linear MSE network, the default analytic setting.
    pub fn linear(widths: Vec<usize>) -> Result<Self, ModelError> {
        Self::new(widths, Activation::Identity, false, LossKind::Mse)
    }

    /// Number of weight layers `L`.
    pub fn depth(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    pub fn hidden_widths(&self) -> &[usize] {
        &self.widths[1..self.widths.len() - 1]
    }

    /// Sum of hidden widths `M`.
    pub fn hidden_total(&self) -> usize {
        self.hidden_widths().iter().sum()
    }

    /// Total parameter count `p`.
    pub fn param_count(&self) -> usize {
        let weights: usize = (1..self.widths.len()).map(|l| self.widths[l] * self.widths[l - 1]).sum();
        if self.use_bias {
            weights + self.widths[1..].iter().sum::<usize>()
        } else {
            weights
        }
    }

    pub fn is_linear(&self) -> bool {
        self.activation == Activation::Identity
    }
}

/// Concrete weights `W^l : M_l × M_{l-1}` and optional bias columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub weights: Vec<Matrix<T>>,
    pub biases: Option<Vec<Matrix<T>>>,
}

impl<T: Scalar> Params<T> {
    pub fn validate(&self, spec: &NetworkSpec) -> Result<(), ModelError> {
        if self.weights.len() != spec.depth() {
            return Err(ModelError::ShapeMismatch(format!(
                "{} weight matrices for depth {}",
                self.weights.len(),
                spec.depth()
            )));
        }
        for (l, w) in self.weights.iter().enumerate() {
            let want = (spec.widths[l + 1], spec.widths[l]);
            if w.shape() != want {
                return Err(ModelError::ShapeMismatch(format!(
                    "layer {} weight is {:?}, expected {:?}",
                    l + 1,
                    w.shape(),
                    want
                )));
            }
        }
        match (&self.biases, spec.use_bias) {
            (None, false) => {}
            (Some(bs), true) => {
                if bs.len() != spec.depth() {
                    return Err(ModelError::ShapeMismatch("bias count != depth".into()));
                }
                for (l, b) in bs.iter().enumerate() {
                    if b.shape() != (spec.widths[l + 1], 1) {
                        return Err(ModelError::ShapeMismatch(format!(
                            "layer {} bias is {:?}, expected ({}, 1)",
                            l + 1,
                            b.shape(),
                            spec.widths[l + 1]
                        )));
                    }
                }
            }
            _ => return Err(ModelError::ShapeMismatch("bias flag and bias storage disagree".into())),
        }
        Ok(())
    }

    /// Flat parameter vector: `vec_row(W^1) … vec_row(W^L)`, then biases.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::new();
        for w in &self.weights {
            out.extend_from_slice(vec_row(w).as_slice());
        }
        if let Some(bs) = &self.biases {
            for b in bs {
                out.extend_from_slice(b.as_slice());
            }
        }
        out
    }

    /// Inverse of [`Params::flatten`] for the given architecture.
    pub fn from_flat(spec: &NetworkSpec, flat: &[T]) -> Result<Self, ModelError> {
        if flat.len() != spec.param_count() {
            return Err(ModelError::ShapeMismatch(format!(
                "flat vector length {} != parameter count {}",
                flat.len(),
                spec.param_count()
            )));
        }
        let mut offset = 0;
        let mut weights = Vec::with_capacity(spec.depth());
        for l in 1..spec.widths.len() {
            let (rows, cols) = (spec.widths[l], spec.widths[l - 1]);
            weights.push(Matrix::from_vec(rows, cols, flat[offset..offset + rows * cols].to_vec())?);
            offset += rows * cols;
        }
        let biases = if spec.use_bias {
            let mut bs = Vec::with_capacity(spec.depth());
            for l in 1..spec.widths.len() {
                let rows = spec.widths[l];
                bs.push(Matrix::from_vec(rows, 1, flat[offset..offset + rows].to_vec())?);
                offset += rows;
            }
            Some(bs)
        } else {
            None
        };
        Ok(Self { weights, biases })
    }
}

/// Weight initialization schemes. All of them produce maximal-rank weight
/// matrices (almost surely for the sampled ones, by construction for the
/// orthogonal ones).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// i.i.d. N(0, 1/M_{l-1}).
    Gaussian,
    /// i.i.d. N(0, 2/(M_l + M_{l-1})) (Glorot, normal variant).
    Glorot,
    /// i.i.d. U(-1, 1).
    Uniform,
    /// Semi-orthogonal rows/columns.
    Orthogonal,
    /// `W^l = scale * O_l` with independent orthogonal `O_l`; requires all
    /// widths equal. Satisfies exact balancedness between consecutive layers.
    Balanced { scale: f64 },
}

/// Draws network parameters. Identical `(spec, scheme, seed)` triples yield
/// bitwise-identical parameters; sampling happens in f64 before conversion so
/// streams do not depend on the scalar type.
pub fn init_params<T: Scalar>(
    spec: &NetworkSpec,
    scheme: InitScheme,
    seed: u64,
) -> Result<Params<T>, ModelError> {
    if let InitScheme::Balanced { .. } = scheme {
        if spec.widths.windows(2).any(|w| w[0] != w[1]) {
            return Err(ModelError::BalancedNeedsSquare(spec.widths.clone()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::with_capacity(spec.depth());
    for l in 1..spec.widths.len() {
        let (rows, cols) = (spec.widths[l], spec.widths[l - 1]);
        let w = match scheme {
            InitScheme::Gaussian => {
                let std = (1.0 / cols as f64).sqrt();
                sample_gaussian(rows, cols, std, &mut rng)
            }
            InitScheme::Glorot => {
                let std = (2.0 / (rows + cols) as f64).sqrt();
                sample_gaussian(rows, cols, std, &mut rng)
            }
            InitScheme::Uniform => {
                Matrix::from_fn(rows, cols, |_, _| cast::<T>(rng.random_range(-1.0..1.0)))
            }
            InitScheme::Orthogonal => semi_orthogonal(rows, cols, &mut rng),
            InitScheme::Balanced { scale } => semi_orthogonal(rows, cols, &mut rng).scale(cast(scale)),
        };
        weights.push(w);
    }
    let biases = if spec.use_bias {
        // Small random biases keep the bias-block structure generic.
        Some(
            (1..spec.widths.len())
                .map(|l| sample_gaussian(spec.widths[l], 1, 0.1, &mut rng))
                .collect(),
        )
    } else {
        None
    };
    let params = Params { weights, biases };
    params.validate(spec)?;
    Ok(params)
}

fn sample_gaussian<T: Scalar>(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| cast::<T>(std * rng.sample::<f64, _>(StandardNormal)))
}

/// Semi-orthogonal matrix: orthonormal rows when wide, orthonormal columns
/// when tall. Modified Gram-Schmidt with a second pass.
fn semi_orthogonal<T: Scalar>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<T> {
    let k = rows.min(cols);
    let n = rows.max(cols);
    // n × k with orthonormal columns
    let mut cols_vec: Vec<Vec<f64>> = Vec::with_capacity(k);
    for _ in 0..k {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for _pass in 0..2 {
            for u in &cols_vec {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (vi, ui) in v.iter_mut().zip(u) {
                    *vi -= dot * ui;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for vi in &mut v {
            *vi /= norm;
        }
        cols_vec.push(v);
    }
    if rows >= cols {
        Matrix::from_fn(rows, cols, |i, j| cast::<T>(cols_vec[j][i]))
    } else {
        Matrix::from_fn(rows, cols, |i, j| cast::<T>(cols_vec[i][j]))
    }
}

/// Everything the forward pass produces, batched column-per-sample.
///
/// `activations[0]` is the input batch, `activations[l]` the output of layer
/// `l`; the output layer is affine so `activations[L]` equals the last
/// pre-activation. Derivative caches exist for hidden layers only.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    pub activations: Vec<Matrix<T>>,
    pub pre_activations: Vec<Matrix<T>>,
    pub act_prime: Vec<Matrix<T>>,
    pub act_second: Vec<Matrix<T>>,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn outputs(&self) -> &Matrix<T> {
        self.activations.last().expect("nonempty")
    }

    pub fn batch_size(&self) -> usize {
        self.activations[0].cols()
    }
}

/// Runs the network on a `d × N` batch.
pub fn forward<T: Scalar>(
    spec: &NetworkSpec,
    params: &Params<T>,
    x_batch: &Matrix<T>,
) -> Result<ForwardCache<T>, ModelError> {
    params.validate(spec)?;
    if x_batch.rows() != spec.input_dim() {
        return Err(ModelError::ShapeMismatch(format!(
            "input batch has {} rows, expected {}",
            x_batch.rows(),
            spec.input_dim()
        )));
    }
    let depth = spec.depth();
    let n = x_batch.cols();
    let mut activations = Vec::with_capacity(depth + 1);
    let mut pre_activations = Vec::with_capacity(depth);
    let mut act_prime = Vec::with_capacity(depth.saturating_sub(1));
    let mut act_second = Vec::with_capacity(depth.saturating_sub(1));
    activations.push(x_batch.clone());
    for l in 0..depth {
        let mut z = params.weights[l].matmul(&activations[l]);
        if let Some(bs) = &params.biases {
            let b = &bs[l];
            for i in 0..z.rows() {
                let bi = b[(i, 0)];
                for j in 0..n {
                    z[(i, j)] += bi;
                }
            }
        }
        let last = l + 1 == depth;
        if last {
            activations.push(z.clone());
        } else {
            let act = spec.activation;
            activations.push(Matrix::from_fn(z.rows(), z.cols(), |i, j| act.apply(z[(i, j)])));
            act_prime.push(Matrix::from_fn(z.rows(), z.cols(), |i, j| act.prime(z[(i, j)])));
            act_second.push(Matrix::from_fn(z.rows(), z.cols(), |i, j| act.second(z[(i, j)])));
        }
        pre_activations.push(z);
    }
    Ok(ForwardCache { activations, pre_activations, act_prime, act_second })
}

/// Loss value, per-sample residuals `∂ℓ/∂ŷ` and per-sample output Hessians
/// `∂²ℓ/∂ŷ²`.
#[derive(Debug, Clone)]
pub struct LossEval<T> {
    pub loss: T,
    pub residuals: Matrix<T>,
    pub loss_output_hessians: Vec<Matrix<T>>,
}

/// Evaluates the empirical loss `(1/N) Σ ℓ` with its first two derivatives in
/// the output.
pub fn evaluate_loss<T: Scalar>(
    spec: &NetworkSpec,
    params: &Params<T>,
    dataset: &Dataset<T>,
) -> Result<LossEval<T>, ModelError> {
    let cache = forward(spec, params, &dataset.inputs)?;
    loss_from_outputs(spec, cache.outputs(), &dataset.targets)
}

/// Loss derivatives given precomputed outputs.
pub fn loss_from_outputs<T: Scalar>(
    spec: &NetworkSpec,
    outputs: &Matrix<T>,
    targets: &Matrix<T>,
) -> Result<LossEval<T>, ModelError> {
    if outputs.shape() != targets.shape() {
        return Err(ModelError::ShapeMismatch(format!(
            "outputs {:?} vs targets {:?}",
            outputs.shape(),
            targets.shape()
        )));
    }
    let (k, n) = outputs.shape();
    let inv_n = T::one() / cast_usize::<T>(n);
    let mut residuals = Matrix::zeros(k, n);
    let mut hessians = Vec::with_capacity(n);
    let mut total = T::zero();
    match spec.loss {
        LossKind::Mse => {
            let eye = Matrix::identity(k);
            for j in 0..n {
                let mut sq = T::zero();
                for i in 0..k {
                    let d = outputs[(i, j)] - targets[(i, j)];
                    residuals[(i, j)] = d;
                    sq += d * d;
                }
                total += cast::<T>(0.5) * sq;
                hessians.push(eye.clone());
            }
        }
        LossKind::CrossEntropy => {
            for j in 0..n {
                let mut zmax = outputs[(0, j)];
                for i in 1..k {
                    zmax = zmax.max(outputs[(i, j)]);
                }
                let mut denom = T::zero();
                for i in 0..k {
                    denom += (outputs[(i, j)] - zmax).exp();
                }
                let log_denom = denom.ln() + zmax;
                let p: Vec<T> = (0..k).map(|i| (outputs[(i, j)] - log_denom).exp()).collect();
                let mut h = Matrix::zeros(k, k);
                for i in 0..k {
                    residuals[(i, j)] = p[i] - targets[(i, j)];
                    total += targets[(i, j)] * (log_denom - outputs[(i, j)]);
                    for m in 0..k {
                        h[(i, m)] = if i == m { p[i] - p[i] * p[m] } else { -p[i] * p[m] };
                    }
                }
                hessians.push(h);
            }
        }
        LossKind::LogCosh => {
            for j in 0..n {
                let mut h = Matrix::zeros(k, k);
                for i in 0..k {
                    let d = outputs[(i, j)] - targets[(i, j)];
                    let t = d.tanh();
                    residuals[(i, j)] = t;
                    h[(i, i)] = T::one() - t * t;
                    // log cosh evaluated stably: |d| + log((1 + e^{-2|d|}) / 2)
                    let a = d.abs();
                    total += a + ((-cast::<T>(2.0) * a).exp() + T::one()).ln() - cast::<T>(2.0).ln();
                }
                hessians.push(h);
            }
        }
    }
    Ok(LossEval { loss: total * inv_n, residuals, loss_output_hessians: hessians })
}

/// Analytic gradient, both as per-layer matrices and flattened in the global
/// parameter order.
#[derive(Debug, Clone)]
pub struct Gradient<T> {
    pub flat: Vec<T>,
    pub weight_grads: Vec<Matrix<T>>,
    pub bias_grads: Option<Vec<Matrix<T>>>,
}

/// Backpropagation for the empirical loss mean.
pub fn gradient<T: Scalar>(
    spec: &NetworkSpec,
    params: &Params<T>,
    dataset: &Dataset<T>,
) -> Result<Gradient<T>, ModelError> {
    let cache = forward(spec, params, &dataset.inputs)?;
    let eval = loss_from_outputs(spec, cache.outputs(), &dataset.targets)?;
    Ok(gradient_from_cache(spec, params, &cache, &eval.residuals))
}

pub(crate) fn gradient_from_cache<T: Scalar>(
    spec: &NetworkSpec,
    params: &Params<T>,
    cache: &ForwardCache<T>,
    residuals: &Matrix<T>,
) -> Gradient<T> {
    let depth = spec.depth();
    let n = cache.batch_size();
    let inv_n = T::one() / cast_usize::<T>(n);
    let mut weight_grads = vec![Matrix::zeros(0, 0); depth];
    let mut bias_grads = spec.use_bias.then(|| vec![Matrix::zeros(0, 0); depth]);
    let mut e = residuals.clone();
    for l in (0..depth).rev() {
        weight_grads[l] = e.matmul(&cache.activations[l].transpose()).scale(inv_n);
        if let Some(bg) = bias_grads.as_mut() {
            bg[l] = e.row_sums().scale(inv_n);
        }
        if l > 0 {
            let back = params.weights[l].transpose().matmul(&e);
            let prime = &cache.act_prime[l - 1];
            e = Matrix::from_fn(back.rows(), back.cols(), |i, j| back[(i, j)] * prime[(i, j)]);
        }
    }
    let mut flat = Vec::new();
    for g in &weight_grads {
        flat.extend_from_slice(vec_row(g).as_slice());
    }
    if let Some(bg) = &bias_grads {
        for g in bg {
            flat.extend_from_slice(g.as_slice());
        }
    }
    Gradient { flat, weight_grads, bias_grads }
}

/// Weight-chain product in the paper's index convention: `chain(p, k, l)` with
/// `k > l` is `W^k ⋯ W^l`, with `k < l` the transposed chain `W^kᵀ ⋯ W^lᵀ`,
/// and `k = l` is `W^k` itself. Layer indices are 1-based; empty chains are
/// not expressible here (callers supply their own identity).
pub fn chain<T: Scalar>(params: &Params<T>, from: usize, to: usize) -> Result<Matrix<T>, ModelError> {
    let depth = params.weights.len();
    for index in [from, to] {
        if index == 0 || index > depth {
            return Err(ModelError::LayerIndex { index, depth });
        }
    }
    if from >= to {
        Ok(chain_desc(params, from, to))
    } else {
        Ok(chain_desc(params, to, from).transpose())
    }
}

/// `W^hi ⋯ W^lo` for `hi ≥ lo` (1-based); identity of size `id_dim` when the
/// range is empty.
pub(crate) fn chain_desc<T: Scalar>(params: &Params<T>, hi: usize, lo: usize) -> Matrix<T> {
    assert!(hi >= lo && lo >= 1, "descending chain needs hi >= lo >= 1");
    let mut acc = params.weights[hi - 1].clone();
    for l in (lo..hi).rev() {
        acc = acc.matmul(&params.weights[l - 1]);
    }
    acc
}

/// Descending chain that may be empty: `W^hi ⋯ W^lo`, or `I(id_dim)` when
/// `hi < lo`.
pub(crate) fn chain_desc_or_identity<T: Scalar>(
    params: &Params<T>,
    hi: usize,
    lo: usize,
    id_dim: usize,
) -> Matrix<T> {
    if hi < lo {
        Matrix::identity(id_dim)
    } else {
        chain_desc(params, hi, lo)
    }
}

/// Per hidden layer, the number of units whose activation derivative is
/// nonzero on at least one sample of the batch.
pub fn active_neurons<T: Scalar>(cache: &ForwardCache<T>) -> Vec<usize> {
    cache
        .act_prime
        .iter()
        .map(|prime| {
            (0..prime.rows())
                .filter(|&i| prime.row(i).iter().any(|&v| v != T::zero()))
                .count()
        })
        .collect()
}
