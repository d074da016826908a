//! Dense feedforward networks: forward/backward passes, losses, Adam, and
//! the shared training loop.
//!
//! Everything runs in f64 — the models here are small (~170k parameters at
//! most), so precision is cheaper than any speed gained from f32. Training
//! is fully deterministic: given the same seed, data and config, two runs
//! produce bit-identical parameters. All randomness flows through
//! `ChaCha8Rng` streams seeded explicitly; nothing reads global RNG state.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

const CHECKPOINT_MAGIC: &[u8; 8] = b"ASDNET01";

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid network configuration: {0}")]
    Config(String),
    #[error("dimension mismatch at layer {layer}: {detail}")]
    DimMismatch { layer: usize, detail: String },
    #[error("loss input mismatch: {0}")]
    LossShape(String),
    #[error("class label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite gradient in layer {layer}")]
    NonFiniteGradient { layer: usize },
    #[error("training data is empty")]
    EmptyData,
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: String, detail: String },
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One fully connected layer: `out = act(W · in + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Array2<f64>, // out_dim × in_dim
    pub biases: Array1<f64>,  // out_dim
    pub activation: Activation,
}

impl DenseLayer {
    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<DenseLayer>,
    seed: u64,
}

impl Network {
    /// Assembles a network from explicit layers, validating that adjacent
    /// dimensions chain. Records seed 0 (no RNG was involved).
    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self, NnError> {
        if layers.is_empty() {
            return Err(NnError::Config("network needs at least one layer".to_string()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(NnError::DimMismatch {
                    layer: i + 1,
                    detail: format!(
                        "layer {} outputs {} but layer {} expects {}",
                        i,
                        pair[0].out_dim(),
                        i + 1,
                        pair[1].in_dim()
                    ),
                });
            }
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.biases.len() != layer.out_dim() {
                return Err(NnError::DimMismatch {
                    layer: i,
                    detail: "bias length does not match output dimension".to_string(),
                });
            }
        }
        Ok(Network { layers, seed: 0 })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    /// Layer sizes including the input: `[in, h1, ..., out]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(DenseLayer::out_dim));
        dims
    }

    pub fn activations(&self) -> Vec<Activation> {
        self.layers.iter().map(|l| l.activation).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    /// Flat parameter access in checkpoint order (per layer: row-major
    /// weights, then biases). Used by checkpointing and gradient checks.
    pub fn get_param(&self, mut index: usize) -> f64 {
        for layer in &self.layers {
            if index < layer.weights.len() {
                return layer.weights.as_slice().unwrap()[index];
            }
            index -= layer.weights.len();
            if index < layer.biases.len() {
                return layer.biases[index];
            }
            index -= layer.biases.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set_param(&mut self, mut index: usize, value: f64) {
        for layer in &mut self.layers {
            if index < layer.weights.len() {
                layer.weights.as_slice_mut().unwrap()[index] = value;
                return;
            }
            index -= layer.weights.len();
            if index < layer.biases.len() {
                layer.biases[index] = value;
                return;
            }
            index -= layer.biases.len();
        }
        panic!("parameter index out of range");
    }
}

/// Glorot-uniform initialization with zero biases: weights drawn from
/// `U(±sqrt(6/(fan_in+fan_out)))`, layer by layer in row-major order, from a
/// ChaCha stream seeded with `seed`.
pub fn init_network(
    dims: &[usize],
    activations: &[Activation],
    seed: u64,
) -> Result<Network, NnError> {
    if dims.len() < 2 {
        return Err(NnError::Config(format!(
            "need at least an input and an output dimension, got {dims:?}"
        )));
    }
    if activations.len() != dims.len() - 1 {
        return Err(NnError::Config(format!(
            "{} activations for {} layers",
            activations.len(),
            dims.len() - 1
        )));
    }
    if let Some(&zero) = dims.iter().find(|&&d| d == 0) {
        return Err(NnError::Config(format!("layer size must be positive, got {zero}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for (i, window) in dims.windows(2).enumerate() {
        let (fan_in, fan_out) = (window[0], window[1]);
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut weights = Array2::zeros((fan_out, fan_in));
        for r in 0..fan_out {
            for c in 0..fan_in {
                weights[[r, c]] = rng.gen_range(-bound..bound);
            }
        }
        layers.push(DenseLayer {
            weights,
            biases: Array1::zeros(fan_out),
            activation: activations[i],
        });
    }
    Ok(Network { layers, seed })
}

/// Per-layer intermediates retained by [`forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    input: Array2<f64>,
    pre: Vec<Array2<f64>>,
    post: Vec<Array2<f64>>,
}

impl ForwardPass {
    /// Final layer output, `B × out_dim`.
    pub fn output(&self) -> &Array2<f64> {
        self.post.last().unwrap()
    }

    /// Post-activation output of an intermediate layer.
    pub fn layer_output(&self, layer: usize) -> &Array2<f64> {
        &self.post[layer]
    }
}

pub fn forward(net: &Network, batch: &Array2<f64>) -> Result<ForwardPass, NnError> {
    if batch.ncols() != net.input_dim() {
        return Err(NnError::DimMismatch {
            layer: 0,
            detail: format!(
                "batch width {} but layer expects {}",
                batch.ncols(),
                net.input_dim()
            ),
        });
    }
    let mut pre = Vec::with_capacity(net.layers.len());
    let mut post = Vec::with_capacity(net.layers.len());
    let mut current = batch.clone();
    for layer in &net.layers {
        let z = current.dot(&layer.weights.t()) + &layer.biases;
        let a = z.mapv(|v| layer.activation.apply(v));
        pre.push(z);
        post.push(a.clone());
        current = a;
    }
    Ok(ForwardPass {
        input: batch.clone(),
        pre,
        post,
    })
}

/// Parameter gradients mirroring a network's shapes.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub d_weights: Vec<Array2<f64>>,
    pub d_biases: Vec<Array1<f64>>,
}

impl Gradients {
    /// Flat access in the same order as [`Network::get_param`].
    pub fn get(&self, mut index: usize) -> f64 {
        for (dw, db) in self.d_weights.iter().zip(&self.d_biases) {
            if index < dw.len() {
                return dw.as_slice().unwrap()[index];
            }
            index -= dw.len();
            if index < db.len() {
                return db[index];
            }
            index -= db.len();
        }
        panic!("gradient index out of range");
    }
}

/// Backpropagates `loss_grad` (gradient of the loss in the network output)
/// through the pass recorded by [`forward`].
pub fn backward(
    net: &Network,
    pass: &ForwardPass,
    loss_grad: &Array2<f64>,
) -> Result<Gradients, NnError> {
    let n_layers = net.layers.len();
    if pass.pre.len() != n_layers || pass.input.ncols() != net.input_dim() {
        return Err(NnError::DimMismatch {
            layer: 0,
            detail: "activations do not match this network".to_string(),
        });
    }
    if loss_grad.dim() != pass.output().dim() {
        return Err(NnError::DimMismatch {
            layer: n_layers - 1,
            detail: format!(
                "loss gradient shape {:?} but output is {:?}",
                loss_grad.dim(),
                pass.output().dim()
            ),
        });
    }
    let mut d_weights = vec![Array2::zeros((0, 0)); n_layers];
    let mut d_biases = vec![Array1::zeros(0); n_layers];
    let mut upstream = loss_grad.clone();
    for l in (0..n_layers).rev() {
        let layer = &net.layers[l];
        if pass.pre[l].dim() != (pass.input.nrows(), layer.out_dim()) {
            return Err(NnError::DimMismatch {
                layer: l,
                detail: "stale activations for this layer".to_string(),
            });
        }
        let delta = &upstream * &pass.pre[l].mapv(|z| layer.activation.derivative(z));
        let below = if l == 0 { &pass.input } else { &pass.post[l - 1] };
        d_weights[l] = delta.t().dot(below);
        d_biases[l] = delta.sum_axis(Axis(0));
        if l > 0 {
            upstream = delta.dot(&layer.weights);
        }
    }
    Ok(Gradients { d_weights, d_biases })
}

/// Mean over the batch of the squared l2 row error, with its gradient.
pub fn mse_loss(pred: &Array2<f64>, target: &Array2<f64>) -> Result<(f64, Array2<f64>), NnError> {
    if pred.dim() != target.dim() {
        return Err(NnError::LossShape(format!(
            "prediction {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let batch = pred.nrows() as f64;
    let diff = pred - target;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / batch;
    let grad = diff.mapv(|d| 2.0 * d / batch);
    Ok((loss, grad))
}

/// MSE with per-column weights: `mean_b Σ_d w_d (pred - target)²`. Used to
/// scale one block of the output (e.g. an appended ID block) by λ.
pub fn mse_loss_weighted_columns(
    pred: &Array2<f64>,
    target: &Array2<f64>,
    col_weights: &Array1<f64>,
) -> Result<(f64, Array2<f64>), NnError> {
    if pred.dim() != target.dim() {
        return Err(NnError::LossShape(format!(
            "prediction {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    if col_weights.len() != pred.ncols() {
        return Err(NnError::LossShape(format!(
            "{} column weights for {} columns",
            col_weights.len(),
            pred.ncols()
        )));
    }
    let batch = pred.nrows() as f64;
    let diff = pred - target;
    let weighted = &diff * col_weights; // broadcast over rows
    let loss = diff
        .iter()
        .zip(weighted.iter())
        .map(|(d, wd)| d * wd)
        .sum::<f64>()
        / batch;
    let grad = weighted.mapv(|wd| 2.0 * wd / batch);
    Ok((loss, grad))
}

/// MSE with per-row weights: `(Σ_b w_b ‖pred_b - target_b‖²) / B`. Weights
/// of 1 reduce to [`mse_loss`] exactly.
pub fn mse_loss_weighted_rows(
    pred: &Array2<f64>,
    target: &Array2<f64>,
    row_weights: &Array1<f64>,
) -> Result<(f64, Array2<f64>), NnError> {
    if pred.dim() != target.dim() {
        return Err(NnError::LossShape(format!(
            "prediction {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    if row_weights.len() != pred.nrows() {
        return Err(NnError::LossShape(format!(
            "{} row weights for {} rows",
            row_weights.len(),
            pred.nrows()
        )));
    }
    let batch = pred.nrows() as f64;
    let diff = pred - target;
    let mut loss = 0.0;
    let mut grad = diff.clone();
    for (b, mut row) in grad.outer_iter_mut().enumerate() {
        let w = row_weights[b];
        loss += w * row.iter().map(|d| d * d).sum::<f64>();
        row.mapv_inplace(|d| 2.0 * w * d / batch);
    }
    Ok((loss / batch, grad))
}

/// Row-wise log-softmax, numerically stable.
pub fn log_softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.outer_iter_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|l| l - lse);
    }
    out
}

/// Mean negative log softmax probability of the true class, with the
/// gradient `(softmax - onehot) / B`.
pub fn softmax_xent_loss(
    logits: &Array2<f64>,
    labels: &[usize],
) -> Result<(f64, Array2<f64>), NnError> {
    if labels.len() != logits.nrows() {
        return Err(NnError::LossShape(format!(
            "{} labels for {} rows",
            labels.len(),
            logits.nrows()
        )));
    }
    let classes = logits.ncols();
    let batch = logits.nrows() as f64;
    let log_p = log_softmax(logits);
    let mut loss = 0.0;
    let mut grad = log_p.mapv(f64::exp);
    for (b, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(NnError::LabelOutOfRange { label, classes });
        }
        loss -= log_p[[b, label]];
        grad[[b, label]] -= 1.0;
    }
    grad.mapv_inplace(|g| g / batch);
    Ok((loss / batch, grad))
}

/// Adam optimizer state: first/second moment accumulators per parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m_weights: Vec<Array2<f64>>,
    v_weights: Vec<Array2<f64>>,
    m_biases: Vec<Array1<f64>>,
    v_biases: Vec<Array1<f64>>,
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(net: &Network, learning_rate: f64) -> Self {
        AdamState {
            m_weights: net.layers.iter().map(|l| Array2::zeros(l.weights.dim())).collect(),
            v_weights: net.layers.iter().map(|l| Array2::zeros(l.weights.dim())).collect(),
            m_biases: net.layers.iter().map(|l| Array1::zeros(l.biases.len())).collect(),
            v_biases: net.layers.iter().map(|l| Array1::zeros(l.biases.len())).collect(),
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One Adam update with bias correction. Fails fast on non-finite gradients
/// rather than letting NaN spread into the parameters.
pub fn adam_step(
    net: &mut Network,
    grads: &Gradients,
    state: &mut AdamState,
) -> Result<(), NnError> {
    if grads.d_weights.len() != net.layers.len() {
        return Err(NnError::DimMismatch {
            layer: 0,
            detail: "gradient layer count does not match network".to_string(),
        });
    }
    for (l, layer) in net.layers.iter().enumerate() {
        if grads.d_weights[l].dim() != layer.weights.dim()
            || grads.d_biases[l].len() != layer.biases.len()
        {
            return Err(NnError::DimMismatch {
                layer: l,
                detail: "gradient shape does not match parameters".to_string(),
            });
        }
        if grads.d_weights[l].iter().any(|g| !g.is_finite())
            || grads.d_biases[l].iter().any(|g| !g.is_finite())
        {
            return Err(NnError::NonFiniteGradient { layer: l });
        }
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let m_corr = 1.0 - state.beta1.powi(t);
    let v_corr = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.learning_rate, state.epsilon);

    for (l, layer) in net.layers.iter_mut().enumerate() {
        ndarray::Zip::from(&mut layer.weights)
            .and(&mut state.m_weights[l])
            .and(&mut state.v_weights[l])
            .and(&grads.d_weights[l])
            .for_each(|w, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= lr * (*m / m_corr) / ((*v / v_corr).sqrt() + eps);
            });
        ndarray::Zip::from(&mut layer.biases)
            .and(&mut state.m_biases[l])
            .and(&mut state.v_biases[l])
            .and(&grads.d_biases[l])
            .for_each(|w, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= lr * (*m / m_corr) / ((*v / v_corr).sqrt() + eps);
            });
    }
    Ok(())
}

/// Loss selector for [`train`].
#[derive(Debug, Clone)]
pub enum Loss {
    Mse,
    /// MSE with per-column weights (see [`mse_loss_weighted_columns`]).
    ColumnWeightedMse(Array1<f64>),
    SoftmaxCrossEntropy,
}

/// Training targets: dense regression targets or class labels.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    Dense(&'a Array2<f64>),
    Classes(&'a [usize]),
}

impl Targets<'_> {
    fn len(&self) -> usize {
        match self {
            Targets::Dense(t) => t.nrows(),
            Targets::Classes(c) => c.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 512,
            learning_rate: 0.001,
            seed: 0,
        }
    }
}

/// Deterministic seeded shuffle of `0..n`, one permutation per epoch.
pub fn epoch_permutation(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(rng);
    indices
}

fn compute_loss(
    loss: &Loss,
    pred: &Array2<f64>,
    targets: &Targets<'_>,
    batch_indices: &[usize],
) -> Result<(f64, Array2<f64>), NnError> {
    match (loss, targets) {
        (Loss::Mse, Targets::Dense(t)) => {
            let batch_targets = t.select(Axis(0), batch_indices);
            mse_loss(pred, &batch_targets)
        }
        (Loss::ColumnWeightedMse(w), Targets::Dense(t)) => {
            let batch_targets = t.select(Axis(0), batch_indices);
            mse_loss_weighted_columns(pred, &batch_targets, w)
        }
        (Loss::SoftmaxCrossEntropy, Targets::Classes(labels)) => {
            let batch_labels: Vec<usize> = batch_indices.iter().map(|&i| labels[i]).collect();
            softmax_xent_loss(pred, &batch_labels)
        }
        _ => Err(NnError::LossShape(
            "loss kind does not match target kind".to_string(),
        )),
    }
}

/// The standard training recipe: per epoch, one seeded shuffle, sequential
/// minibatches (the last may be short), one Adam step per minibatch.
/// Returns the trained network and the per-epoch mean loss.
pub fn train(
    net: Network,
    data: &Array2<f64>,
    targets: Targets<'_>,
    loss: &Loss,
    cfg: &TrainConfig,
) -> Result<(Network, Vec<f64>), NnError> {
    if data.nrows() == 0 {
        return Err(NnError::EmptyData);
    }
    if targets.len() != data.nrows() {
        return Err(NnError::LossShape(format!(
            "{} targets for {} rows",
            targets.len(),
            data.nrows()
        )));
    }
    if cfg.batch_size == 0 {
        return Err(NnError::Config("batch_size must be positive".to_string()));
    }
    let mut net = net;
    let mut state = AdamState::new(&net, cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = data.nrows();
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let order = epoch_permutation(&mut rng, n);
        let mut epoch_loss = 0.0;
        for batch_indices in order.chunks(cfg.batch_size) {
            let batch = data.select(Axis(0), batch_indices);
            let pass = forward(&net, &batch)?;
            let (batch_loss, loss_grad) = compute_loss(loss, pass.output(), &targets, batch_indices)?;
            let grads = backward(&net, &pass, &loss_grad)?;
            adam_step(&mut net, &grads, &mut state)?;
            epoch_loss += batch_loss * batch_indices.len() as f64;
        }
        history.push(epoch_loss / n as f64);
    }
    Ok((net, history))
}

fn activation_code(a: Activation) -> u8 {
    match a {
        Activation::Identity => 0,
        Activation::Relu => 1,
    }
}

fn activation_from_code(code: u8) -> Option<Activation> {
    match code {
        0 => Some(Activation::Identity),
        1 => Some(Activation::Relu),
        _ => None,
    }
}

/// Writes a checkpoint: magic, init seed, config hash, dims, activation
/// codes, then every parameter as little-endian f64 in layer order.
pub fn save_checkpoint(
    net: &Network,
    path: impl AsRef<Path>,
    config_hash: &str,
) -> Result<(), NnError> {
    let path = path.as_ref();
    let io_err = |e| NnError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    let inner = |w: &mut BufWriter<File>| -> io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u64::<LittleEndian>(net.seed)?;
        w.write_u32::<LittleEndian>(config_hash.len() as u32)?;
        w.write_all(config_hash.as_bytes())?;
        let dims = net.dims();
        w.write_u32::<LittleEndian>(net.layers.len() as u32)?;
        for d in &dims {
            w.write_u32::<LittleEndian>(*d as u32)?;
        }
        for layer in &net.layers {
            w.write_u8(activation_code(layer.activation))?;
        }
        for layer in &net.layers {
            for value in layer.weights.iter() {
                w.write_f64::<LittleEndian>(*value)?;
            }
            for value in layer.biases.iter() {
                w.write_f64::<LittleEndian>(*value)?;
            }
        }
        w.flush()
    };
    inner(&mut w).map_err(io_err)
}

/// Loads a checkpoint, validating magic, dimensions and length before
/// accepting any parameter. Returns the network and its config hash.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Network, String), NnError> {
    let path = path.as_ref();
    let ck_err = |detail: String| NnError::Checkpoint {
        path: path.display().to_string(),
        detail,
    };
    let file = File::open(path).map_err(|e| NnError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| ck_err(format!("truncated magic: {e}")))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ck_err("bad magic, not a model checkpoint".to_string()));
    }
    let seed = r.read_u64::<LittleEndian>().map_err(|e| ck_err(e.to_string()))?;
    let hash_len = r.read_u32::<LittleEndian>().map_err(|e| ck_err(e.to_string()))? as usize;
    if hash_len > 1024 {
        return Err(ck_err(format!("implausible hash length {hash_len}")));
    }
    let mut hash = vec![0u8; hash_len];
    r.read_exact(&mut hash).map_err(|e| ck_err(format!("truncated hash: {e}")))?;
    let hash = String::from_utf8(hash).map_err(|_| ck_err("hash is not UTF-8".to_string()))?;

    let n_layers = r.read_u32::<LittleEndian>().map_err(|e| ck_err(e.to_string()))? as usize;
    if n_layers == 0 || n_layers > 64 {
        return Err(ck_err(format!("implausible layer count {n_layers}")));
    }
    let mut dims = Vec::with_capacity(n_layers + 1);
    for _ in 0..n_layers + 1 {
        let d = r.read_u32::<LittleEndian>().map_err(|e| ck_err(e.to_string()))? as usize;
        if d == 0 {
            return Err(ck_err("zero layer dimension".to_string()));
        }
        dims.push(d);
    }
    let mut activations = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let code = r.read_u8().map_err(|e| ck_err(e.to_string()))?;
        activations.push(
            activation_from_code(code).ok_or_else(|| ck_err(format!("unknown activation code {code}")))?,
        );
    }
    let mut layers = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let (fan_in, fan_out) = (dims[l], dims[l + 1]);
        let mut weights = Array2::zeros((fan_out, fan_in));
        for value in weights.iter_mut() {
            *value = r
                .read_f64::<LittleEndian>()
                .map_err(|e| ck_err(format!("truncated parameters in layer {l}: {e}")))?;
        }
        let mut biases = Array1::zeros(fan_out);
        for value in biases.iter_mut() {
            *value = r
                .read_f64::<LittleEndian>()
                .map_err(|e| ck_err(format!("truncated parameters in layer {l}: {e}")))?;
        }
        layers.push(DenseLayer {
            weights,
            biases,
            activation: activations[l],
        });
    }
    let mut trailing = [0u8; 1];
    match r.read(&mut trailing) {
        Ok(0) => {}
        Ok(_) => return Err(ck_err("trailing bytes after parameters".to_string())),
        Err(e) => return Err(ck_err(e.to_string())),
    }
    Ok((Network { layers, seed }, hash))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_batch(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn init_shapes_and_zero_biases() {
        let net = init_network(&[4, 3], &[Activation::Identity], 1).unwrap();
        assert_eq!(net.layers()[0].weights.dim(), (3, 4));
        assert!(net.layers()[0].biases.iter().all(|&b| b == 0.0));
        assert_eq!(net.param_count(), 12 + 3);
    }

    #[test]
    fn init_deterministic_for_equal_seeds() {
        let dims = [6, 5, 4];
        let acts = [Activation::Relu, Activation::Identity];
        let a = init_network(&dims, &acts, 42).unwrap();
        let b = init_network(&dims, &acts, 42).unwrap();
        assert_eq!(a, b);
        let c = init_network(&dims, &acts, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_weight_mean_near_zero() {
        let net = init_network(&[320, 128], &[Activation::Relu], 7).unwrap();
        let w = &net.layers()[0].weights;
        let mean = w.sum() / w.len() as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        let bound = (6.0 / 448.0f64).sqrt();
        assert!(w.iter().all(|&v| v.abs() < bound));
    }

    #[test]
    fn init_rejects_bad_config() {
        assert!(matches!(
            init_network(&[4], &[], 0),
            Err(NnError::Config(_))
        ));
        assert!(matches!(
            init_network(&[4, 0], &[Activation::Relu], 0),
            Err(NnError::Config(_))
        ));
        assert!(matches!(
            init_network(&[4, 3], &[], 0),
            Err(NnError::Config(_))
        ));
    }

    #[test]
    fn forward_identity_layer_passes_through() {
        let mut net = init_network(&[3, 3], &[Activation::Identity], 0).unwrap();
        net.layers[0].weights = Array2::eye(3);
        let batch = random_batch(5, 3, 2);
        let pass = forward(&net, &batch).unwrap();
        assert_eq!(pass.output(), &batch);
    }

    #[test]
    fn forward_relu_clamps_negatives() {
        let mut net = init_network(&[2, 2], &[Activation::Relu], 0).unwrap();
        net.layers[0].weights = Array2::eye(2);
        let batch = ndarray::array![[-1.0, -0.5], [-3.0, -0.1]];
        let pass = forward(&net, &batch).unwrap();
        assert!(pass.output().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_matches_hand_rolled_arithmetic() {
        let net = init_network(&[4, 3, 2], &[Activation::Relu, Activation::Identity], 3).unwrap();
        let batch = random_batch(6, 4, 4);
        let pass = forward(&net, &batch).unwrap();
        for b in 0..6 {
            // Layer 1 by explicit loops.
            let mut hidden = [0.0; 3];
            for (o, h) in hidden.iter_mut().enumerate() {
                let mut acc = net.layers()[0].biases[o];
                for i in 0..4 {
                    acc += net.layers()[0].weights[[o, i]] * batch[[b, i]];
                }
                *h = acc.max(0.0);
            }
            for o in 0..2 {
                let mut acc = net.layers()[1].biases[o];
                for (i, h) in hidden.iter().enumerate() {
                    acc += net.layers()[1].weights[[o, i]] * h;
                }
                let got = pass.output()[[b, o]];
                assert!((got - acc).abs() < 1e-12, "row {b} out {o}: {got} vs {acc}");
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let net = init_network(&[4, 2], &[Activation::Identity], 0).unwrap();
        let batch = random_batch(3, 5, 0);
        assert!(matches!(
            forward(&net, &batch),
            Err(NnError::DimMismatch { layer: 0, .. })
        ));
    }

    #[test]
    fn backward_zero_loss_grad_gives_zero_gradients() {
        let net = init_network(&[4, 3, 2], &[Activation::Relu, Activation::Identity], 5).unwrap();
        let batch = random_batch(4, 4, 6);
        let pass = forward(&net, &batch).unwrap();
        let grads = backward(&net, &pass, &Array2::zeros((4, 2))).unwrap();
        assert!(grads.d_weights.iter().all(|w| w.iter().all(|&g| g == 0.0)));
        assert!(grads.d_biases.iter().all(|b| b.iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn single_linear_layer_matches_closed_form() {
        // One sample, identity activation: d/dW of ||Wx + b - y||² is
        // 2(Wx + b - y)xᵀ and d/db is 2(Wx + b - y).
        let net = init_network(&[3, 2], &[Activation::Identity], 8).unwrap();
        let x = random_batch(1, 3, 9);
        let y = random_batch(1, 2, 10);
        let pass = forward(&net, &x).unwrap();
        let (_, loss_grad) = mse_loss(pass.output(), &y).unwrap();
        let grads = backward(&net, &pass, &loss_grad).unwrap();
        let residual = pass.output() - &y;
        for o in 0..2 {
            for i in 0..3 {
                let expect = 2.0 * residual[[0, o]] * x[[0, i]];
                assert!((grads.d_weights[0][[o, i]] - expect).abs() < 1e-12);
            }
            assert!((grads.d_biases[0][o] - 2.0 * residual[[0, o]]).abs() < 1e-12);
        }
    }

    /// Central finite differences over every parameter of a small network.
    fn finite_difference_check(
        dims: &[usize],
        acts: &[Activation],
        loss_fn: &dyn Fn(&Array2<f64>) -> (f64, Array2<f64>),
        batch: &Array2<f64>,
    ) -> f64 {
        let mut net = init_network(dims, acts, 77).unwrap();
        let pass = forward(&net, batch).unwrap();
        let (_, loss_grad) = loss_fn(pass.output());
        let grads = backward(&net, &pass, &loss_grad).unwrap();
        let h = 1e-5;
        let mut worst = 0.0f64;
        for idx in 0..net.param_count() {
            let orig = net.get_param(idx);
            net.set_param(idx, orig + h);
            let up = loss_fn(forward(&net, batch).unwrap().output()).0;
            net.set_param(idx, orig - h);
            let down = loss_fn(forward(&net, batch).unwrap().output()).0;
            net.set_param(idx, orig);
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(idx);
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences_mse() {
        let batch = random_batch(5, 4, 11);
        let target = random_batch(5, 2, 12);
        let worst = finite_difference_check(
            &[4, 6, 2],
            &[Activation::Relu, Activation::Identity],
            &|pred| mse_loss(pred, &target).unwrap(),
            &batch,
        );
        assert!(worst < 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn gradients_match_finite_differences_xent() {
        let batch = random_batch(6, 4, 13);
        let labels = vec![0usize, 2, 1, 2, 0, 1];
        let worst = finite_difference_check(
            &[4, 5, 3],
            &[Activation::Relu, Activation::Identity],
            &|pred| softmax_xent_loss(pred, &labels).unwrap(),
            &batch,
        );
        assert!(worst < 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn gradients_match_finite_differences_weighted_losses() {
        let batch = random_batch(4, 3, 14);
        let target = random_batch(4, 5, 15);
        let col_w = ndarray::array![1.0, 1.0, 1.0, 0.25, 0.25];
        let worst = finite_difference_check(
            &[3, 6, 5],
            &[Activation::Relu, Activation::Identity],
            &|pred| mse_loss_weighted_columns(pred, &target, &col_w).unwrap(),
            &batch,
        );
        assert!(worst < 1e-5, "column-weighted worst {worst}");

        let row_w = ndarray::array![1.0, 0.5, 2.0, 0.0];
        let worst = finite_difference_check(
            &[3, 6, 5],
            &[Activation::Relu, Activation::Identity],
            &|pred| mse_loss_weighted_rows(pred, &target, &row_w).unwrap(),
            &batch,
        );
        assert!(worst < 1e-5, "row-weighted worst {worst}");
    }

    #[test]
    fn mse_loss_examples() {
        let a = ndarray::array![[0.0, 0.0]];
        let b = ndarray::array![[1.0, 0.0]];
        let (loss, grad) = mse_loss(&a, &a).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
        let (loss, _) = mse_loss(&a, &b).unwrap();
        assert_eq!(loss, 1.0);

        // Random pair against an explicit summation oracle.
        let p = random_batch(7, 5, 16);
        let t = random_batch(7, 5, 17);
        let (loss, _) = mse_loss(&p, &t).unwrap();
        let mut oracle = 0.0;
        for b in 0..7 {
            for d in 0..5 {
                let diff: f64 = p[[b, d]] - t[[b, d]];
                oracle += diff * diff;
            }
        }
        oracle /= 7.0;
        assert!((loss - oracle).abs() < 1e-12);
    }

    #[test]
    fn xent_uniform_and_saturated() {
        let logits = Array2::zeros((3, 4));
        let (loss, _) = softmax_xent_loss(&logits, &[0, 1, 3]).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);

        let mut dominant = Array2::zeros((1, 4));
        dominant[[0, 2]] = 30.0;
        let (loss, _) = softmax_xent_loss(&dominant, &[2]).unwrap();
        assert!(loss < 1e-10);

        // Log-sum-exp oracle on random logits.
        let logits = random_batch(5, 6, 18);
        let labels = vec![0usize, 5, 3, 2, 1];
        let (loss, _) = softmax_xent_loss(&logits, &labels).unwrap();
        let mut oracle = 0.0;
        for (b, &label) in labels.iter().enumerate() {
            let row: Vec<f64> = logits.row(b).to_vec();
            let lse = row.iter().map(|l| l.exp()).sum::<f64>().ln();
            oracle += lse - row[label];
        }
        oracle /= 5.0;
        assert!((loss - oracle).abs() < 1e-10);

        assert!(matches!(
            softmax_xent_loss(&logits, &[0, 1, 2, 3, 6]),
            Err(NnError::LabelOutOfRange { label: 6, classes: 6 })
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits = random_batch(8, 5, 19);
        let probs = log_softmax(&logits).mapv(f64::exp);
        for row in probs.outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut net = init_network(&[3, 2], &[Activation::Identity], 20).unwrap();
        let before = net.clone();
        let mut state = AdamState::new(&net, 0.001);
        let grads = Gradients {
            d_weights: vec![Array2::zeros((2, 3))],
            d_biases: vec![Array1::zeros(2)],
        };
        adam_step(&mut net, &grads, &mut state).unwrap();
        assert_eq!(net, before);
        assert_eq!(state.step_count, 1);
    }

    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        let mut net = init_network(&[1, 1], &[Activation::Identity], 21).unwrap();
        let w0 = net.layers()[0].weights[[0, 0]];
        let mut state = AdamState::new(&net, 0.001);
        let grads = Gradients {
            d_weights: vec![ndarray::array![[0.37]]],
            d_biases: vec![ndarray::array![-2.5]],
        };
        adam_step(&mut net, &grads, &mut state).unwrap();
        let dw = net.layers()[0].weights[[0, 0]] - w0;
        assert!((dw + 0.001).abs() < 1e-6, "dw {dw}");
        let db = net.layers()[0].biases[0];
        assert!((db - 0.001).abs() < 1e-6, "db {db}");
    }

    #[test]
    fn adam_optimizes_scalar_quadratic() {
        // f(w) = (w - 3)², gradient 2(w - 3), from w = 0 with lr = 0.1.
        let mut net = init_network(&[1, 1], &[Activation::Identity], 22).unwrap();
        net.layers[0].weights[[0, 0]] = 0.0;
        let mut state = AdamState::new(&net, 0.1);
        for _ in 0..100 {
            let w = net.layers()[0].weights[[0, 0]];
            let grads = Gradients {
                d_weights: vec![ndarray::array![[2.0 * (w - 3.0)]]],
                d_biases: vec![Array1::zeros(1)],
            };
            adam_step(&mut net, &grads, &mut state).unwrap();
        }
        let w = net.layers()[0].weights[[0, 0]];
        assert!((w - 3.0).abs() < 0.5, "w after 100 steps: {w}");
        assert_eq!(state.step_count, 100);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut net = init_network(&[2, 1], &[Activation::Identity], 23).unwrap();
        let mut state = AdamState::new(&net, 0.001);
        let grads = Gradients {
            d_weights: vec![ndarray::array![[f64::NAN, 0.0]]],
            d_biases: vec![Array1::zeros(1)],
        };
        assert!(matches!(
            adam_step(&mut net, &grads, &mut state),
            Err(NnError::NonFiniteGradient { layer: 0 })
        ));
    }

    #[test]
    fn train_zero_learning_rate_keeps_parameters() {
        let net = init_network(&[4, 3, 4], &[Activation::Relu, Activation::Identity], 24).unwrap();
        let before = net.clone();
        let data = random_batch(20, 4, 25);
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 8,
            learning_rate: 0.0,
            seed: 1,
        };
        let (after, history) = train(net, &data, Targets::Dense(&data), &Loss::Mse, &cfg).unwrap();
        assert_eq!(after, before);
        assert_eq!(history.len(), 5);
    }

    #[test]
    fn train_is_deterministic() {
        let data = random_batch(50, 6, 26);
        let cfg = TrainConfig {
            epochs: 8,
            batch_size: 16,
            learning_rate: 0.001,
            seed: 9,
        };
        let run = || {
            let net = init_network(&[6, 4, 6], &[Activation::Relu, Activation::Identity], 30).unwrap();
            train(net, &data, Targets::Dense(&data), &Loss::Mse, &cfg).unwrap()
        };
        let (net_a, hist_a) = run();
        let (net_b, hist_b) = run();
        assert_eq!(net_a, net_b);
        assert_eq!(hist_a, hist_b);
        assert!(hist_a.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn train_fits_repeated_vector() {
        let row = ndarray::array![0.3, -0.2, 0.7, 0.1];
        let data = Array2::from_shape_fn((32, 4), |(_, c)| row[c]);
        let net = init_network(&[4, 4, 4], &[Activation::Identity, Activation::Identity], 31).unwrap();
        let cfg = TrainConfig {
            epochs: 200,
            batch_size: 32,
            learning_rate: 0.01,
            seed: 2,
        };
        let (_, history) = train(net, &data, Targets::Dense(&data), &Loss::Mse, &cfg).unwrap();
        let last = *history.last().unwrap();
        assert!(last < 1e-3, "final loss {last}");
        assert!(last < history[0]);
    }

    #[test]
    fn train_rejects_empty_and_mismatched() {
        let net = init_network(&[2, 2], &[Activation::Identity], 0).unwrap();
        let empty = Array2::zeros((0, 2));
        assert!(matches!(
            train(net.clone(), &empty, Targets::Dense(&empty), &Loss::Mse, &TrainConfig::default()),
            Err(NnError::EmptyData)
        ));
        let data = random_batch(4, 2, 1);
        assert!(matches!(
            train(net, &data, Targets::Classes(&[0, 1]), &Loss::Mse, &TrainConfig::default()),
            Err(NnError::LossShape(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = init_network(
            &[5, 4, 3],
            &[Activation::Relu, Activation::Identity],
            99,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&net, &path, "deadbeef").unwrap();
        let (back, hash) = load_checkpoint(&path).unwrap();
        assert_eq!(back, net);
        assert_eq!(hash, "deadbeef");
        assert_eq!(back.seed(), 99);
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let net = init_network(&[3, 2], &[Activation::Identity], 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&net, &path, "h").unwrap();

        // Truncate: drop the last 8 bytes.
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(NnError::Checkpoint { .. })
        ));

        // Wrong magic.
        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(NnError::Checkpoint { .. })
        ));

        // Trailing garbage.
        let mut long = bytes;
        long.push(0);
        std::fs::write(&path, &long).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(NnError::Checkpoint { .. })
        ));
    }
}
