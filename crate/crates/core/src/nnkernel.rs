//! A small feed-forward network kernel: linear, leaky-ReLU, batch
//! normalization and tanh layers with explicit forward/backward passes, an
//! adaptive-moment optimizer, and a finite-difference gradient checker.
//!
//! All math is `f64`. A forward pass in training mode returns a [`Tape`] of
//! cached activations that [`Network::backward`] consumes.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::{gemm, DenseMatrix, MatrixError, Transpose};

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("layer {layer}: expected input width {expected}, got {got}")]
    ShapeMismatch {
        layer: usize,
        expected: usize,
        got: usize,
    },
    #[error("layer {layer} outputs {got} features but layer {next} expects {expected}")]
    BrokenChain {
        layer: usize,
        next: usize,
        expected: usize,
        got: usize,
    },
    #[error("batch normalization in training mode needs at least 2 rows, got {0}")]
    DegenerateBatch(usize),
    #[error("backward needs a tape from a training-mode forward pass on the same network")]
    MissingCache,
    #[error("upstream gradient shape {got:?} does not match output shape {expected:?}")]
    GradientShape {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("non-finite gradient in parameter tensor {tensor}")]
    NonFiniteGradient { tensor: usize },
    #[error("optimizer was built for {expected} tensors of sizes {sizes:?}, got {got}")]
    OptimizerShape {
        expected: usize,
        sizes: Vec<usize>,
        got: usize,
    },
    #[error("network is in {0:?} mode")]
    WrongMode(Mode),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
}

type Result<T> = std::result::Result<T, NnError>;

/// `y = x·Wᵀ + b` with `W` stored out×in.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

impl Linear {
    /// Uniform(−1/√in, 1/√in) initialization for weights and bias.
    pub fn init(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (inputs.max(1) as f64).sqrt();
        let weight = DenseMatrix::from_fn(outputs, inputs, |_, _| rng.gen_range(-bound..bound));
        let bias = (0..outputs).map(|_| rng.gen_range(-bound..bound)).collect();
        Self { weight, bias }
    }

    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(features: usize, eps: f64, momentum: f64) -> Self {
        Self {
            gamma: vec![1.0; features],
            beta: vec![0.0; features],
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            eps,
            momentum,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Linear(Linear),
    LeakyRelu { slope: f64 },
    BatchNorm(BatchNorm),
    Tanh,
}

impl Layer {
    fn io(&self) -> (Option<usize>, Option<usize>) {
        match self {
            Layer::Linear(l) => (Some(l.inputs()), Some(l.outputs())),
            Layer::BatchNorm(b) => (Some(b.features()), Some(b.features())),
            Layer::LeakyRelu { .. } | Layer::Tanh => (None, None),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics; the forward pass is a pure function.
    Infer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    mode: Mode,
}

enum Cache {
    Linear {
        input: DenseMatrix,
    },
    LeakyRelu {
        input: DenseMatrix,
    },
    BatchNorm {
        normalized: DenseMatrix,
        inv_std: Vec<f64>,
    },
    Tanh {
        output: DenseMatrix,
    },
}

/// Activations cached by a training-mode forward pass.
pub struct Tape {
    caches: Vec<Cache>,
    output_shape: (usize, usize),
    /// Per batch-norm layer: (batch mean, unbiased batch variance).
    batch_stats: Vec<(usize, Vec<f64>, Vec<f64>)>,
}

/// Gradient of one layer's parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerGrad {
    Linear { weight: DenseMatrix, bias: Vec<f64> },
    BatchNorm { gamma: Vec<f64>, beta: Vec<f64> },
    None,
}

/// Parameter gradients of a whole network, in layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    /// Flattened views in the order of [`Network::parameters`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for g in &self.layers {
            match g {
                LayerGrad::Linear { weight, bias } => {
                    out.push(weight.as_slice());
                    out.push(bias.as_slice());
                }
                LayerGrad::BatchNorm { gamma, beta } => {
                    out.push(gamma.as_slice());
                    out.push(beta.as_slice());
                }
                LayerGrad::None => {}
            }
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for g in &mut self.layers {
            match g {
                LayerGrad::Linear { weight, bias } => {
                    out.push(weight.as_mut_slice());
                    out.push(bias.as_mut_slice());
                }
                LayerGrad::BatchNorm { gamma, beta } => {
                    out.push(gamma.as_mut_slice());
                    out.push(beta.as_mut_slice());
                }
                LayerGrad::None => {}
            }
        }
        out
    }
}

impl Network {
    /// Validates that layer widths chain. Starts in training mode.
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let mut width: Option<(usize, usize)> = None;
        for (idx, layer) in layers.iter().enumerate() {
            let (input, output) = layer.io();
            if let (Some((prev, w)), Some(input)) = (width, input) {
                if w != input {
                    return Err(NnError::BrokenChain {
                        layer: prev,
                        next: idx,
                        expected: input,
                        got: w,
                    });
                }
            }
            if let Some(output) = output {
                width = Some((idx, output));
            }
        }
        Ok(Self {
            layers,
            mode: Mode::Train,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.layers.iter().find_map(|l| l.io().0)
    }

    pub fn output_dim(&self) -> Option<usize> {
        self.layers.iter().rev().find_map(|l| l.io().1)
    }

    /// Trainable tensors: weight and bias per linear layer, gamma and beta per
    /// batch-norm layer, in layer order.
    pub fn parameters(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Linear(l) => {
                    out.push(l.weight.as_slice());
                    out.push(l.bias.as_slice());
                }
                Layer::BatchNorm(b) => {
                    out.push(b.gamma.as_slice());
                    out.push(b.beta.as_slice());
                }
                _ => {}
            }
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Linear(l) => {
                    out.push(l.weight.as_mut_slice());
                    out.push(l.bias.as_mut_slice());
                }
                Layer::BatchNorm(b) => {
                    out.push(b.gamma.as_mut_slice());
                    out.push(b.beta.as_mut_slice());
                }
                _ => {}
            }
        }
        out
    }

    /// Indices into [`Network::parameters`] of tensors whose gradient flows
    /// through a batch-norm layer's batch statistics.
    pub fn batchnorm_coupled_tensors(&self) -> Vec<usize> {
        let last_bn = self
            .layers
            .iter()
            .rposition(|l| matches!(l, Layer::BatchNorm(_)));
        let mut out = Vec::new();
        let mut tensor = 0;
        for (idx, layer) in self.layers.iter().enumerate() {
            let count = match layer {
                Layer::Linear(_) | Layer::BatchNorm(_) => 2,
                _ => 0,
            };
            if last_bn.is_some_and(|bn| idx <= bn) {
                out.extend(tensor..tensor + count);
            }
            tensor += count;
        }
        out
    }

    /// Training-mode forward pass: uses batch statistics, updates the running
    /// statistics, and returns the tape for [`Network::backward`].
    pub fn forward_train(&mut self, input: &DenseMatrix) -> Result<(DenseMatrix, Tape)> {
        if self.mode != Mode::Train {
            return Err(NnError::WrongMode(self.mode));
        }
        let (out, tape) = self.forward_pure(input, true)?;
        let tape = tape.expect("training pass records a tape");
        for (layer, mean, var) in &tape.batch_stats {
            if let Layer::BatchNorm(bn) = &mut self.layers[*layer] {
                let mom = bn.momentum;
                for j in 0..bn.features() {
                    bn.running_mean[j] = (1.0 - mom) * bn.running_mean[j] + mom * mean[j];
                    bn.running_var[j] = (1.0 - mom) * bn.running_var[j] + mom * var[j];
                }
            }
        }
        Ok((out, tape))
    }

    /// Inference-mode forward pass using running statistics.
    pub fn infer(&self, input: &DenseMatrix) -> Result<DenseMatrix> {
        if self.mode != Mode::Infer {
            return Err(NnError::WrongMode(self.mode));
        }
        Ok(self.forward_pure(input, false)?.0)
    }

    /// Forward pass that leaves the network untouched. With `train` set it
    /// normalizes by batch statistics and records a tape.
    pub fn forward_pure(
        &self,
        input: &DenseMatrix,
        train: bool,
    ) -> Result<(DenseMatrix, Option<Tape>)> {
        let mut x = input.clone();
        let mut caches = Vec::with_capacity(if train { self.layers.len() } else { 0 });
        let mut batch_stats = Vec::new();
        for (idx, layer) in self.layers.iter().enumerate() {
            if let (Some(expected), got) = (layer.io().0, x.cols()) {
                if expected != got {
                    return Err(NnError::ShapeMismatch {
                        layer: idx,
                        expected,
                        got,
                    });
                }
            }
            x = match layer {
                Layer::Linear(l) => {
                    let mut y = DenseMatrix::zeros(x.rows(), l.outputs());
                    for r in 0..y.rows() {
                        y.row_mut(r).copy_from_slice(&l.bias);
                    }
                    gemm(
                        1.0,
                        &x,
                        Transpose::No,
                        &l.weight,
                        Transpose::Yes,
                        1.0,
                        &mut y,
                    )?;
                    if train {
                        caches.push(Cache::Linear { input: x });
                    }
                    y
                }
                Layer::LeakyRelu { slope } => {
                    let mut y = x.clone();
                    y.as_mut_slice()
                        .iter_mut()
                        .for_each(|v| *v = if *v > 0.0 { *v } else { slope * *v });
                    if train {
                        caches.push(Cache::LeakyRelu { input: x });
                    }
                    y
                }
                Layer::Tanh => {
                    let mut y = x;
                    y.as_mut_slice().iter_mut().for_each(|v| *v = v.tanh());
                    if train {
                        caches.push(Cache::Tanh { output: y.clone() });
                    }
                    y
                }
                Layer::BatchNorm(bn) => {
                    if train {
                        let (y, normalized, inv_std, mean, var) = batchnorm_train(bn, &x)?;
                        caches.push(Cache::BatchNorm {
                            normalized,
                            inv_std,
                        });
                        batch_stats.push((idx, mean, var));
                        y
                    } else {
                        batchnorm_infer(bn, x)
                    }
                }
            };
        }
        let tape = train.then(|| Tape {
            caches,
            output_shape: x.shape(),
            batch_stats,
        });
        Ok((x, tape))
    }

    /// Gradients of a scalar loss with respect to every parameter and the
    /// input, given `upstream = ∂loss/∂output`.
    pub fn backward(
        &self,
        tape: &Tape,
        upstream: &DenseMatrix,
    ) -> Result<(Gradients, DenseMatrix)> {
        let (grads, input_grad) = self.backward_impl(tape, upstream, true)?;
        Ok((grads, input_grad.expect("input gradient requested")))
    }

    /// As [`Network::backward`] without the input gradient, which saves the
    /// most expensive product when the input is data.
    pub fn backward_params(&self, tape: &Tape, upstream: &DenseMatrix) -> Result<Gradients> {
        Ok(self.backward_impl(tape, upstream, false)?.0)
    }

    fn backward_impl(
        &self,
        tape: &Tape,
        upstream: &DenseMatrix,
        want_input: bool,
    ) -> Result<(Gradients, Option<DenseMatrix>)> {
        if tape.caches.len() != self.layers.len() {
            return Err(NnError::MissingCache);
        }
        if upstream.shape() != tape.output_shape {
            return Err(NnError::GradientShape {
                expected: tape.output_shape,
                got: upstream.shape(),
            });
        }
        let mut grads = vec![LayerGrad::None; self.layers.len()];
        let mut dy = upstream.clone();
        for idx in (0..self.layers.len()).rev() {
            let need_dx = want_input || idx > 0;
            match (&self.layers[idx], &tape.caches[idx]) {
                (Layer::Linear(l), Cache::Linear { input }) => {
                    let mut dw = DenseMatrix::zeros(l.outputs(), l.inputs());
                    gemm(1.0, &dy, Transpose::Yes, input, Transpose::No, 0.0, &mut dw)?;
                    let mut db = vec![0.0; l.outputs()];
                    for r in 0..dy.rows() {
                        db.iter_mut().zip(dy.row(r)).for_each(|(b, g)| *b += g);
                    }
                    grads[idx] = LayerGrad::Linear {
                        weight: dw,
                        bias: db,
                    };
                    if need_dx {
                        let mut dx = DenseMatrix::zeros(dy.rows(), l.inputs());
                        gemm(
                            1.0,
                            &dy,
                            Transpose::No,
                            &l.weight,
                            Transpose::No,
                            0.0,
                            &mut dx,
                        )?;
                        dy = dx;
                    }
                }
                (Layer::LeakyRelu { slope }, Cache::LeakyRelu { input }) => {
                    dy.as_mut_slice()
                        .iter_mut()
                        .zip(input.as_slice())
                        .for_each(|(g, x)| {
                            if *x <= 0.0 {
                                *g *= slope;
                            }
                        });
                }
                (Layer::Tanh, Cache::Tanh { output }) => {
                    dy.as_mut_slice()
                        .iter_mut()
                        .zip(output.as_slice())
                        .for_each(|(g, y)| *g *= 1.0 - y * y);
                }
                (
                    Layer::BatchNorm(bn),
                    Cache::BatchNorm {
                        normalized,
                        inv_std,
                    },
                ) => {
                    let (dx, dgamma, dbeta) = batchnorm_backward(bn, normalized, inv_std, &dy);
                    grads[idx] = LayerGrad::BatchNorm {
                        gamma: dgamma,
                        beta: dbeta,
                    };
                    dy = dx;
                }
                _ => return Err(NnError::MissingCache),
            }
        }
        Ok((Gradients { layers: grads }, want_input.then_some(dy)))
    }
}

type BatchNormTrain = (DenseMatrix, DenseMatrix, Vec<f64>, Vec<f64>, Vec<f64>);

fn batchnorm_train(bn: &BatchNorm, x: &DenseMatrix) -> Result<BatchNormTrain> {
    let (b, f) = x.shape();
    if b < 2 {
        return Err(NnError::DegenerateBatch(b));
    }
    let mut mean = vec![0.0; f];
    for r in 0..b {
        mean.iter_mut().zip(x.row(r)).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= b as f64);
    let mut var = vec![0.0; f];
    for r in 0..b {
        for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= b as f64);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + bn.eps).sqrt()).collect();

    let mut normalized = DenseMatrix::zeros(b, f);
    let mut y = DenseMatrix::zeros(b, f);
    for r in 0..b {
        let xr = x.row(r);
        let nr = normalized.row_mut(r);
        for j in 0..f {
            nr[j] = (xr[j] - mean[j]) * inv_std[j];
        }
        let nr = normalized.row(r).to_vec();
        let yr = y.row_mut(r);
        for j in 0..f {
            yr[j] = nr[j] * bn.gamma[j] + bn.beta[j];
        }
    }
    let unbiased: Vec<f64> = var.iter().map(|v| v * b as f64 / (b - 1) as f64).collect();
    Ok((y, normalized, inv_std, mean, unbiased))
}

fn batchnorm_infer(bn: &BatchNorm, mut x: DenseMatrix) -> DenseMatrix {
    let scale: Vec<f64> = bn
        .running_var
        .iter()
        .zip(&bn.gamma)
        .map(|(v, g)| g / (v + bn.eps).sqrt())
        .collect();
    for r in 0..x.rows() {
        for (j, v) in x.row_mut(r).iter_mut().enumerate() {
            *v = (*v - bn.running_mean[j]) * scale[j] + bn.beta[j];
        }
    }
    x
}

fn batchnorm_backward(
    bn: &BatchNorm,
    normalized: &DenseMatrix,
    inv_std: &[f64],
    dy: &DenseMatrix,
) -> (DenseMatrix, Vec<f64>, Vec<f64>) {
    let (b, f) = dy.shape();
    let mut dgamma = vec![0.0; f];
    let mut dbeta = vec![0.0; f];
    for r in 0..b {
        for ((j, g), n) in dy.row(r).iter().enumerate().zip(normalized.row(r)) {
            dgamma[j] += g * n;
            dbeta[j] += g;
        }
    }
    // dx = γ·σ⁻¹/b · (b·dy − Σdy − x̂·Σ(dy·x̂))
    let bf = b as f64;
    let mut dx = DenseMatrix::zeros(b, f);
    for r in 0..b {
        let (gr, nr) = (dy.row(r), normalized.row(r));
        for (j, out) in dx.row_mut(r).iter_mut().enumerate() {
            *out = bn.gamma[j] * inv_std[j] / bf * (bf * gr[j] - dbeta[j] - nr[j] * dgamma[j]);
        }
    }
    (dx, dgamma, dbeta)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay: parameters are scaled by `1 − lr·weight_decay`
    /// before each moment update.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adaptive-moment optimizer state over a fixed list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    fn check_shapes(&self, got: &[usize]) -> Result<()> {
        let sizes: Vec<usize> = self.first.iter().map(Vec::len).collect();
        if sizes != got {
            return Err(NnError::OptimizerShape {
                expected: sizes.len(),
                sizes,
                got: got.len(),
            });
        }
        Ok(())
    }

    /// One update of every tensor. `decay[t]`, when given, restricts weight
    /// decay of tensor `t` to the entries where it is `true`. Nothing is
    /// modified if any gradient is non-finite.
    pub fn step(
        &mut self,
        params: &mut [&mut [f64]],
        grads: &[&[f64]],
        decay: Option<&[Option<&[bool]>]>,
    ) -> Result<()> {
        let param_sizes: Vec<usize> = params.iter().map(|p| p.len()).collect();
        let grad_sizes: Vec<usize> = grads.iter().map(|g| g.len()).collect();
        self.check_shapes(&param_sizes)?;
        self.check_shapes(&grad_sizes)?;
        if let Some(t) = grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(NnError::NonFiniteGradient { tensor: t });
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let shrink = 1.0 - lr * weight_decay;
        for (t, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let only = decay.and_then(|d| d.get(t).copied().flatten());
            let (m, v) = (&mut self.first[t], &mut self.second[t]);
            for j in 0..p.len() {
                if weight_decay != 0.0 && only.is_none_or(|mask| mask[j]) {
                    p[j] *= shrink;
                }
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Number of parameter entries to probe (all of them if larger).
    pub samples: usize,
    /// Draw `samples` entries from every tensor instead of from the
    /// concatenation, so small tensors are not drowned out by large ones.
    pub per_tensor: bool,
    /// Gradients below this magnitude are compared absolutely.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            samples: 200,
            per_tensor: false,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradSample {
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// `|a − n| / max(|a|, |n|, floor)`.
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub samples: Vec<GradSample>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.samples.iter().map(|s| s.rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error() < tolerance
    }

    /// Pass iff every sample is below the tolerance chosen for its tensor.
    pub fn passes_with(&self, tolerance: impl Fn(usize) -> f64) -> bool {
        self.samples
            .iter()
            .all(|s| s.rel_error < tolerance(s.tensor))
    }
}

/// Compares `analytic` gradients against central finite differences of
/// `loss` on a random sample of parameter entries.
///
/// `params` exposes the tensors of `model` in the same order as `analytic`.
pub fn finite_difference_check<M>(
    model: &mut M,
    analytic: &[&[f64]],
    mut params: impl FnMut(&mut M) -> Vec<&mut [f64]>,
    mut loss: impl FnMut(&M) -> f64,
    config: &GradCheckConfig,
) -> GradCheckReport {
    let offsets: Vec<usize> = analytic
        .iter()
        .scan(0, |acc, t| {
            let start = *acc;
            *acc += t.len();
            Some(start)
        })
        .collect();
    let total: usize = analytic.iter().map(|t| t.len()).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut picks = if config.per_tensor {
        let mut picks = Vec::new();
        for (t, tensor) in analytic.iter().enumerate() {
            let n = tensor.len();
            picks.extend(
                sample(&mut rng, n, config.samples.min(n))
                    .into_iter()
                    .map(|i| offsets[t] + i),
            );
        }
        picks
    } else {
        sample(&mut rng, total, config.samples.min(total)).into_vec()
    };
    picks.sort_unstable();

    let mut samples = Vec::with_capacity(picks.len());
    for flat in picks {
        let tensor = offsets.partition_point(|&o| o <= flat) - 1;
        let index = flat - offsets[tensor];
        let original = params(model)[tensor][index];
        params(model)[tensor][index] = original + config.step;
        let plus = loss(model);
        params(model)[tensor][index] = original - config.step;
        let minus = loss(model);
        params(model)[tensor][index] = original;
        let numeric = (plus - minus) / (2.0 * config.step);
        let a = analytic[tensor][index];
        let rel_error = (a - numeric).abs() / a.abs().max(numeric.abs()).max(config.floor);
        samples.push(GradSample {
            tensor,
            index,
            analytic: a,
            numeric,
            rel_error,
        });
    }
    GradCheckReport { samples }
}

/// Backprop-versus-finite-difference check of a network under `loss`, which
/// maps the network output to `(value, ∂value/∂output)`. Uses batch
/// statistics without touching running statistics.
pub fn grad_check(
    net: &Network,
    loss: impl Fn(&DenseMatrix) -> (f64, DenseMatrix),
    batch: &DenseMatrix,
    config: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let (out, tape) = net.forward_pure(batch, true)?;
    let (_, upstream) = loss(&out);
    let (grads, _) = net.backward(&tape.expect("training pass"), &upstream)?;
    check_network_gradients(net, &loss, batch, &grads, config)
}

/// Checks externally supplied gradients (e.g. deliberately corrupted ones)
/// against finite differences of `net` under `loss`.
pub fn check_network_gradients(
    net: &Network,
    loss: impl Fn(&DenseMatrix) -> (f64, DenseMatrix),
    batch: &DenseMatrix,
    grads: &Gradients,
    config: &GradCheckConfig,
) -> Result<GradCheckReport> {
    net.forward_pure(batch, true)?;
    let mut probe = net.clone();
    Ok(finite_difference_check(
        &mut probe,
        &grads.slices(),
        |n| n.parameters_mut(),
        |n| {
            let (out, _) = n.forward_pure(batch, true).expect("shapes validated above");
            loss(&out).0
        },
        config,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(17)
    }

    fn random_batch(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::from_fn(rows, cols, |_, _| r.gen_range(-1.0..1.0))
    }

    /// ½‖y − target‖² with a fixed pseudo-random target.
    fn squared_loss(out: &DenseMatrix) -> (f64, DenseMatrix) {
        let target = DenseMatrix::from_fn(out.rows(), out.cols(), |r, c| {
            ((r * 3 + c) % 5) as f64 * 0.2 - 0.4
        });
        let mut grad = out.clone();
        grad.axpy(-1.0, &target).unwrap();
        let value = 0.5 * grad.as_slice().iter().map(|v| v * v).sum::<f64>();
        (value, grad)
    }

    fn three_layer(rng: &mut ChaCha8Rng) -> Network {
        Network::new(vec![
            Layer::Linear(Linear::init(6, 5, rng)),
            Layer::LeakyRelu { slope: 0.01 },
            Layer::Linear(Linear::init(5, 4, rng)),
            Layer::Tanh,
            Layer::Linear(Linear::init(4, 3, rng)),
        ])
        .unwrap()
    }

    #[test]
    fn zero_linear_gives_zero_output() {
        let net = Network::new(vec![Layer::Linear(Linear {
            weight: DenseMatrix::zeros(2, 3),
            bias: vec![0.0; 2],
        })])
        .unwrap();
        let (y, _) = net.forward_pure(&random_batch(4, 3, 1), false).unwrap();
        assert_eq!(y, DenseMatrix::zeros(4, 2));
    }

    #[test]
    fn leaky_relu_and_tanh_definitions() {
        let mut net = Network::new(vec![Layer::LeakyRelu { slope: 0.01 }]).unwrap();
        net.set_mode(Mode::Infer);
        let y = net
            .infer(&DenseMatrix::from_rows(&[vec![-1.0, 2.0]]).unwrap())
            .unwrap();
        assert_eq!(y.as_slice(), &[-0.01, 2.0]);

        let mut net = Network::new(vec![Layer::Tanh]).unwrap();
        net.set_mode(Mode::Infer);
        let y = net
            .infer(&DenseMatrix::from_rows(&[vec![0.0, 40.0, -40.0]]).unwrap())
            .unwrap();
        assert_eq!(y.get(0, 0), 0.0);
        assert!((y.get(0, 1) - 1.0).abs() < 1e-6 && (y.get(0, 2) + 1.0).abs() < 1e-6);
    }

    #[test]
    fn broken_chain_and_shape_mismatch() {
        let mut r = rng();
        assert!(matches!(
            Network::new(vec![
                Layer::Linear(Linear::init(3, 4, &mut r)),
                Layer::Tanh,
                Layer::Linear(Linear::init(5, 2, &mut r)),
            ]),
            Err(NnError::BrokenChain { .. })
        ));
        let net = three_layer(&mut r);
        assert!(matches!(
            net.forward_pure(&DenseMatrix::zeros(2, 5), false),
            Err(NnError::ShapeMismatch {
                layer: 0,
                expected: 6,
                got: 5
            })
        ));
    }

    #[test]
    fn batchnorm_rejects_single_row_in_training() {
        let mut net = Network::new(vec![Layer::BatchNorm(BatchNorm::new(3, 1e-5, 0.1))]).unwrap();
        assert_eq!(
            net.forward_train(&DenseMatrix::zeros(1, 3)).err(),
            Some(NnError::DegenerateBatch(1))
        );
        net.set_mode(Mode::Infer);
        assert!(net.infer(&DenseMatrix::zeros(1, 3)).is_ok());
    }

    #[test]
    fn batchnorm_normalizes_batches() {
        let mut net = Network::new(vec![Layer::BatchNorm(BatchNorm::new(4, 1e-5, 0.1))]).unwrap();
        let x = DenseMatrix::from_fn(16, 4, |r, c| {
            ((r * 7 + c * 3) % 11) as f64 * (c + 1) as f64 + 50.0
        });
        let (y, _) = net.forward_train(&x).unwrap();
        for c in 0..4 {
            let col = y.column(c);
            let mean = col.iter().sum::<f64>() / 16.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-10 * 50.0);
            // eps shifts the variance by eps/(var+eps).
            let raw_var = x.column(c).iter().map(|v| v * v).sum::<f64>() / 16.0
                - (x.column(c).iter().sum::<f64>() / 16.0).powi(2);
            assert!((var - raw_var / (raw_var + 1e-5)).abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
        let Layer::BatchNorm(bn) = &net.layers()[0] else {
            unreachable!()
        };
        assert!(bn.running_mean.iter().all(|&m| m > 0.0));
        assert!(bn.running_var.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn infer_is_pure_and_requires_infer_mode() {
        let mut r = rng();
        let mut net = three_layer(&mut r);
        let x = random_batch(5, 6, 2);
        assert_eq!(net.infer(&x).err(), Some(NnError::WrongMode(Mode::Train)));
        net.set_mode(Mode::Infer);
        let a = net.infer(&x).unwrap();
        let b = net.infer(&x).unwrap();
        assert_eq!(a, b);
        assert!(net.forward_train(&x).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut r = rng();
        let mut net = three_layer(&mut r);
        let (y, tape) = net.forward_train(&random_batch(4, 6, 3)).unwrap();
        let (grads, dx) = net
            .backward(&tape, &DenseMatrix::zeros(y.rows(), y.cols()))
            .unwrap();
        assert!(grads.slices().iter().all(|t| t.iter().all(|&v| v == 0.0)));
        assert!(dx.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_weight_gradient_is_column_sum_outer_input() {
        let mut r = rng();
        let mut net = Network::new(vec![Layer::Linear(Linear::init(3, 2, &mut r))]).unwrap();
        let x = random_batch(4, 3, 5);
        let (y, tape) = net.forward_train(&x).unwrap();
        // loss = Σ outputs ⇒ ∂loss/∂W[o][i] = Σ_b x[b][i] for every o.
        let ones = DenseMatrix::from_fn(y.rows(), y.cols(), |_, _| 1.0);
        let (grads, _) = net.backward(&tape, &ones).unwrap();
        let LayerGrad::Linear { weight, bias } = &grads.layers[0] else {
            unreachable!()
        };
        for o in 0..2 {
            for i in 0..3 {
                let expected: f64 = x.column(i).iter().sum();
                assert!((weight.get(o, i) - expected).abs() < 1e-12);
            }
        }
        assert_eq!(bias, &vec![4.0, 4.0]);
    }

    #[test]
    fn backward_without_tape_entries_fails() {
        let mut r = rng();
        let net = three_layer(&mut r);
        let tape = Tape {
            caches: Vec::new(),
            output_shape: (1, 3),
            batch_stats: Vec::new(),
        };
        assert_eq!(
            net.backward(&tape, &DenseMatrix::zeros(1, 3)).err(),
            Some(NnError::MissingCache)
        );
    }

    #[test]
    fn three_layer_gradients_match_finite_differences() {
        let mut r = rng();
        let net = three_layer(&mut r);
        let batch = random_batch(8, 6, 4);
        let config = GradCheckConfig {
            samples: 1000,
            ..Default::default()
        };
        let report = grad_check(&net, squared_loss, &batch, &config).unwrap();
        assert!(
            report.passes(1e-4),
            "max rel error {}",
            report.max_rel_error()
        );

        // input gradient too
        let (out, tape) = net.forward_pure(&batch, true).unwrap();
        let (_, up) = squared_loss(&out);
        let (_, dx) = net.backward(&tape.unwrap(), &up).unwrap();
        let mut probe = batch.clone();
        let report = finite_difference_check(
            &mut probe,
            &[dx.as_slice()],
            |b| vec![b.as_mut_slice()],
            |b| squared_loss(&net.forward_pure(b, true).unwrap().0).0,
            &config,
        );
        assert!(report.passes(1e-4));
    }

    #[test]
    fn per_tensor_sampling_covers_every_tensor() {
        let mut r = rng();
        let net = three_layer(&mut r);
        let config = GradCheckConfig {
            samples: 2,
            per_tensor: true,
            ..Default::default()
        };
        let report = grad_check(&net, squared_loss, &random_batch(4, 6, 1), &config).unwrap();
        for t in 0..net.parameters().len() {
            assert_eq!(report.samples.iter().filter(|s| s.tensor == t).count(), 2);
        }
    }

    #[test]
    fn linear_tanh_passes_and_sign_flip_fails() {
        let mut r = rng();
        let net =
            Network::new(vec![Layer::Linear(Linear::init(5, 3, &mut r)), Layer::Tanh]).unwrap();
        let batch = random_batch(6, 5, 8);
        let config = GradCheckConfig::default();
        assert!(grad_check(&net, squared_loss, &batch, &config)
            .unwrap()
            .passes(1e-4));

        let (out, tape) = net.forward_pure(&batch, true).unwrap();
        let (_, up) = squared_loss(&out);
        let (mut grads, _) = net.backward(&tape.unwrap(), &up).unwrap();
        grads
            .slices_mut()
            .into_iter()
            .for_each(|t| t.iter_mut().for_each(|v| *v = -*v));
        let report = check_network_gradients(&net, squared_loss, &batch, &grads, &config).unwrap();
        assert!(!report.passes(1e-4));
    }

    #[test]
    fn batchnorm_network_passes_gradient_check() {
        let mut r = rng();
        let net = Network::new(vec![
            Layer::Linear(Linear::init(6, 5, &mut r)),
            Layer::LeakyRelu { slope: 0.01 },
            Layer::BatchNorm(BatchNorm::new(5, 1e-5, 0.1)),
            Layer::Linear(Linear::init(5, 3, &mut r)),
            Layer::Tanh,
        ])
        .unwrap();
        let config = GradCheckConfig {
            samples: 500,
            ..Default::default()
        };
        let report = grad_check(&net, squared_loss, &random_batch(8, 6, 9), &config).unwrap();
        assert!(
            report.passes(1e-3),
            "max rel error {}",
            report.max_rel_error()
        );
        assert_eq!(net.batchnorm_coupled_tensors(), vec![0, 1, 2, 3]);
    }

    fn params_of(net: &Network) -> Vec<Vec<f64>> {
        net.parameters().iter().map(|p| p.to_vec()).collect()
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters() {
        let mut p = vec![1.0, -2.0, 3.0];
        let g = vec![0.0; 3];
        let mut opt = Adam::new(AdamConfig::default(), &[3]);
        for _ in 0..10 {
            opt.step(&mut [p.as_mut_slice()], &[g.as_slice()], None)
                .unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(opt.steps(), 10);
    }

    #[test]
    fn adam_moves_against_constant_gradient() {
        let mut p = vec![0.0, 0.0];
        let g = vec![0.5, -2.0];
        let mut opt = Adam::new(AdamConfig::default(), &[2]);
        for _ in 0..100 {
            opt.step(&mut [p.as_mut_slice()], &[g.as_slice()], None)
                .unwrap();
        }
        assert!(p[0] < 0.0 && p[1] > 0.0);
    }

    #[test]
    fn adam_minimizes_quadratic_bowl() {
        let mut w = vec![0.6, -0.8];
        let mut opt = Adam::new(
            AdamConfig {
                lr: 1e-2,
                ..Default::default()
            },
            &[2],
        );
        for _ in 0..500 {
            let g: Vec<f64> = w.iter().map(|x| 2.0 * x).collect();
            opt.step(&mut [w.as_mut_slice()], &[g.as_slice()], None)
                .unwrap();
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm < 1e-3, "‖w‖ = {norm}");
    }

    #[test]
    fn adam_rejects_non_finite_gradients_atomically() {
        let mut a = vec![1.0];
        let mut b = vec![1.0];
        let mut opt = Adam::new(AdamConfig::default(), &[1, 1]);
        let err = opt
            .step(
                &mut [a.as_mut_slice(), b.as_mut_slice()],
                &[&[0.1], &[f64::NAN]],
                None,
            )
            .unwrap_err();
        assert_eq!(err, NnError::NonFiniteGradient { tensor: 1 });
        assert_eq!((a[0], b[0], opt.steps()), (1.0, 1.0, 0));
    }

    #[test]
    fn masked_weight_decay_skips_unmasked_entries() {
        let mut p = vec![1.0, 1.0];
        let mut opt = Adam::new(
            AdamConfig {
                weight_decay: 1.0,
                ..Default::default()
            },
            &[2],
        );
        let mask = [true, false];
        opt.step(
            &mut [p.as_mut_slice()],
            &[&[0.0, 0.0]],
            Some(&[Some(&mask[..])]),
        )
        .unwrap();
        assert!(p[0] < 1.0);
        assert_eq!(p[1], 1.0);
    }

    #[test]
    fn training_step_changes_parameters_deterministically() {
        let run = || {
            let mut r = rng();
            let mut net = three_layer(&mut r);
            let sizes: Vec<usize> = net.parameters().iter().map(|p| p.len()).collect();
            let mut opt = Adam::new(AdamConfig::default(), &sizes);
            let batch = random_batch(8, 6, 1);
            for _ in 0..5 {
                let (y, tape) = net.forward_train(&batch).unwrap();
                let (_, up) = squared_loss(&y);
                let grads = net.backward_params(&tape, &up).unwrap();
                opt.step(&mut net.parameters_mut(), &grads.slices(), None)
                    .unwrap();
            }
            params_of(&net)
        };
        assert_eq!(run(), run());
    }
}
