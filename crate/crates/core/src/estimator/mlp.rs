//! Small feedforward networks trained with mini-batch Adam.
//!
//! Forward pass: affine + ReLU for every hidden layer, then an affine output
//! layer followed by the head (softmax for classifiers, identity for
//! regressors). Layer weights are stored row-major with one row per output
//! unit, so `z[j] = sum_i w[j * cols + i] * x[i] + b[j]`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prob::ProbDist;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    ClassifierSoftmax,
    RegressorLinear,
}

impl Head {
    pub fn as_str(self) -> &'static str {
        match self {
            Head::ClassifierSoftmax => "classifier_softmax",
            Head::RegressorLinear => "regressor_linear",
        }
    }
}

fn default_tol() -> f64 {
    1e-4
}

fn default_patience() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub hidden_sizes: Vec<usize>,
    pub head: Head,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Effective batch size is `min(batch_size, N)`.
    pub batch_size: usize,
    pub l2: f64,
    pub seed: u64,
    /// Training stops once the epoch loss has failed to improve by `tol` for
    /// more than `n_iter_no_change` consecutive epochs. `tol = 0` disables it.
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_patience")]
    pub n_iter_no_change: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden_sizes: vec![100],
            head: Head::ClassifierSoftmax,
            learning_rate: 1e-3,
            max_epochs: 200,
            batch_size: 200,
            l2: 1e-4,
            seed: 0,
            tol: default_tol(),
            n_iter_no_change: default_patience(),
        }
    }
}

impl MlpConfig {
    /// Per-annotator classifier: one hidden layer of 512 units.
    pub fn annotator_classifier(seed: u64) -> Self {
        Self {
            hidden_sizes: vec![512],
            seed,
            ..Self::default()
        }
    }

    /// Direct crowd-distribution regressor: two hidden layers of 100 units.
    pub fn crowd_regressor(seed: u64) -> Self {
        Self {
            hidden_sizes: vec![100, 100],
            head: Head::RegressorLinear,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.hidden_sizes.is_empty() || self.hidden_sizes.contains(&0) {
            return fail("hidden_sizes must be non-empty and positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if self.max_epochs == 0 || self.batch_size == 0 {
            return fail("max_epochs and batch_size must be positive");
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) || !(self.tol >= 0.0 && self.tol.is_finite()) {
            return fail("l2 and tol must be non-negative");
        }
        Ok(())
    }
}

/// Dense layer, `rows` outputs by `cols` inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    pub bias: Vec<f64>,
}

impl Layer {
    fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let weights = (0..rows * cols).map(|_| rng.random_range(-limit..=limit)).collect();
        Self {
            weights,
            rows,
            cols,
            bias: vec![0.0; rows],
        }
    }

    fn apply(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for (row, b) in self.weights.chunks_exact(self.cols).zip(&self.bias) {
            out.push(row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + b);
        }
    }

    fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Training targets. Classifiers accept either form; regressors only
/// distributions.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    Labels { labels: &'a [usize], num_classes: usize },
    Dists(&'a [ProbDist]),
}

impl Targets<'_> {
    fn len(&self) -> usize {
        match self {
            Targets::Labels { labels, .. } => labels.len(),
            Targets::Dists(d) => d.len(),
        }
    }

    fn output_dim(&self) -> Result<usize> {
        match self {
            Targets::Labels { num_classes, .. } => Ok(*num_classes),
            Targets::Dists(d) => d.first().map(|p| p.len()).ok_or(Error::EmptyInput),
        }
    }

    fn dense(&self) -> Result<Vec<Vec<f64>>> {
        match self {
            Targets::Labels { labels, num_classes } => labels
                .iter()
                .map(|&l| ProbDist::one_hot(*num_classes, l).map(ProbDist::into_vec))
                .collect(),
            Targets::Dists(d) => {
                let k = self.output_dim()?;
                d.iter()
                    .map(|p| {
                        if p.len() != k {
                            Err(Error::DimensionMismatch {
                                expected: k,
                                got: p.len(),
                            })
                        } else {
                            Ok(p.to_vec())
                        }
                    })
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ModelFile", try_from = "ModelFile")]
pub struct MlpModel {
    pub config: MlpConfig,
    pub input_dim: usize,
    pub output_dim: usize,
    pub layers: Vec<Layer>,
}

/// On-disk layout of a model.
#[derive(Serialize, Deserialize)]
struct ModelFile {
    config: MlpConfig,
    input_dim: usize,
    output_dim: usize,
    layers: Vec<Layer>,
    head: Head,
}

impl From<MlpModel> for ModelFile {
    fn from(m: MlpModel) -> Self {
        Self {
            head: m.config.head,
            config: m.config,
            input_dim: m.input_dim,
            output_dim: m.output_dim,
            layers: m.layers,
        }
    }
}

impl TryFrom<ModelFile> for MlpModel {
    type Error = Error;

    fn try_from(f: ModelFile) -> Result<Self> {
        if f.head != f.config.head {
            return Err(Error::ShapeMismatch("head disagrees with config.head".into()));
        }
        let model = MlpModel {
            config: f.config,
            input_dim: f.input_dim,
            output_dim: f.output_dim,
            layers: f.layers,
        };
        model.check_shapes()?;
        Ok(model)
    }
}

/// Per-sample intermediate values of a forward pass.
struct Trace {
    /// Pre-activations of every layer (the last one is the raw output).
    pre: Vec<Vec<f64>>,
    /// Post-ReLU activations of the hidden layers.
    post: Vec<Vec<f64>>,
}

impl MlpModel {
    /// Fresh network with seeded Glorot-uniform weights and zero biases.
    pub fn init(config: MlpConfig, input_dim: usize, output_dim: usize) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 || output_dim == 0 {
            return Err(Error::ShapeMismatch(
                "input and output dimensions must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Self::init_with(config, input_dim, output_dim, &mut rng);
        Ok(model)
    }

    fn init_with(config: MlpConfig, input_dim: usize, output_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut sizes = vec![input_dim];
        sizes.extend(&config.hidden_sizes);
        sizes.push(output_dim);
        let layers = sizes.windows(2).map(|w| Layer::glorot(w[1], w[0], rng)).collect();
        Self {
            config,
            input_dim,
            output_dim,
            layers,
        }
    }

    fn check_shapes(&self) -> Result<()> {
        let mut expected_cols = self.input_dim;
        for (i, layer) in self.layers.iter().enumerate() {
            let ok = layer.cols == expected_cols
                && layer.weights.len() == layer.rows * layer.cols
                && layer.bias.len() == layer.rows;
            if !ok {
                return Err(Error::ShapeMismatch(format!("layer {i} has inconsistent shape")));
            }
            expected_cols = layer.rows;
        }
        if expected_cols != self.output_dim || self.layers.len() != self.config.hidden_sizes.len() + 1 {
            return Err(Error::ShapeMismatch("layers do not chain to output_dim".into()));
        }
        Ok(())
    }

    pub fn head(&self) -> Head {
        self.config.head
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::ShapeMismatch(format!(
                "feature vector has length {}, model expects {}",
                x.len(),
                self.input_dim
            )));
        }
        Ok(())
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len() - 1);
        let last = self.layers.len() - 1;
        let mut z = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let input: &[f64] = if i == 0 { x } else { &post[i - 1] };
            layer.apply(input, &mut z);
            if i < last {
                post.push(z.iter().map(|v| v.max(0.0)).collect());
            }
            pre.push(z.clone());
        }
        Trace { pre, post }
    }

    /// Raw output-layer values (logits or unconstrained regression output).
    pub fn forward_raw(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.trace(x).pre.pop().expect("at least one layer"))
    }

    /// Which hidden units are active (pre-activation > 0), layer by layer.
    pub fn activation_pattern(&self, x: &[f64]) -> Result<Vec<bool>> {
        self.check_input(x)?;
        let trace = self.trace(x);
        let hidden = &trace.pre[..trace.pre.len() - 1];
        Ok(hidden.iter().flatten().map(|&z| z > 0.0).collect())
    }

    /// Output distribution: softmax for classifiers, clamp-and-renormalize
    /// for regressors.
    pub fn predict_dist(&self, x: &[f64]) -> Result<ProbDist> {
        let raw = self.forward_raw(x)?;
        match self.config.head {
            Head::ClassifierSoftmax => ProbDist::softmax(&raw),
            Head::RegressorLinear => Ok(project_to_simplex(&raw)),
        }
    }

    /// All parameters, layer by layer, weights before biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            out.extend(&layer.weights);
            out.extend(&layer.bias);
        }
        out
    }

    /// Inverse of [`MlpModel::params`].
    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                expected: self.num_params(),
                got: params.len(),
            });
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let (w, b) = (layer.weights.len(), layer.bias.len());
            layer.weights.copy_from_slice(&params[offset..offset + w]);
            layer.bias.copy_from_slice(&params[offset + w..offset + w + b]);
            offset += w + b;
        }
        Ok(())
    }

    /// Objective over the given samples treated as one batch, and its
    /// gradient in [`MlpModel::params`] order.
    ///
    /// The objective is the mean per-sample loss (soft cross-entropy for
    /// classifiers, [`crate::distributions::mse_loss`] for regressors) plus
    /// `l2 / (2B) * ||W||^2` over the weights.
    pub fn loss_and_gradient(&self, inputs: &[Vec<f64>], targets: Targets<'_>) -> Result<(f64, Vec<f64>)> {
        let dense = self.check_training_data(inputs, targets)?;
        let idx: Vec<usize> = (0..inputs.len()).collect();
        let mut grad = vec![0.0; self.num_params()];
        let loss = self.batch_loss_grad(inputs, &dense, &idx, &mut grad);
        Ok((loss, grad))
    }

    fn check_training_data(&self, inputs: &[Vec<f64>], targets: Targets<'_>) -> Result<Vec<Vec<f64>>> {
        if inputs.is_empty() {
            return Err(Error::EmptyInput);
        }
        if targets.len() != inputs.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} inputs but {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        if self.config.head == Head::RegressorLinear && matches!(targets, Targets::Labels { .. }) {
            return Err(Error::ShapeMismatch("regressor needs distribution targets".into()));
        }
        for x in inputs {
            self.check_input(x)?;
        }
        let dense = targets.dense()?;
        if dense[0].len() != self.output_dim {
            return Err(Error::DimensionMismatch {
                expected: self.output_dim,
                got: dense[0].len(),
            });
        }
        Ok(dense)
    }

    /// Accumulates the batch gradient into `grad` (which must be zeroed) and
    /// returns the batch objective.
    fn batch_loss_grad(&self, inputs: &[Vec<f64>], targets: &[Vec<f64>], batch: &[usize], grad: &mut [f64]) -> f64 {
        let scale = 1.0 / batch.len() as f64;
        let k = self.output_dim as f64;
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut offset = 0;
        for layer in &self.layers {
            offsets.push(offset);
            offset += layer.num_params();
        }

        let mut loss = 0.0;
        for &n in batch {
            let x = &inputs[n];
            let t = &targets[n];
            let trace = self.trace(x);
            let out = trace.pre.last().expect("output layer");

            let mut delta: Vec<f64> = match self.config.head {
                Head::ClassifierSoftmax => {
                    let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + out.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
                    let t_sum: f64 = t.iter().sum();
                    loss -= t.iter().zip(out).map(|(ti, zi)| ti * (zi - lse)).sum::<f64>();
                    out.iter()
                        .zip(t)
                        .map(|(zi, ti)| ((zi - lse).exp() * t_sum - ti) * scale)
                        .collect()
                }
                Head::RegressorLinear => {
                    loss += out.iter().zip(t).map(|(zi, ti)| (zi - ti).powi(2)).sum::<f64>() / k;
                    out.iter().zip(t).map(|(zi, ti)| 2.0 * (zi - ti) / k * scale).collect()
                }
            };

            for li in (0..self.layers.len()).rev() {
                let layer = &self.layers[li];
                let input: &[f64] = if li == 0 { x } else { &trace.post[li - 1] };
                let base = offsets[li];
                let (gw, gb) = grad[base..base + layer.num_params()].split_at_mut(layer.weights.len());
                for (j, d) in delta.iter().enumerate() {
                    if *d == 0.0 {
                        continue;
                    }
                    gb[j] += d;
                    for (g, xi) in gw[j * layer.cols..(j + 1) * layer.cols].iter_mut().zip(input) {
                        *g += d * xi;
                    }
                }
                if li > 0 {
                    let below = &trace.pre[li - 1];
                    let mut next = vec![0.0; layer.cols];
                    for (j, d) in delta.iter().enumerate() {
                        if *d == 0.0 {
                            continue;
                        }
                        for (acc, w) in next
                            .iter_mut()
                            .zip(&layer.weights[j * layer.cols..(j + 1) * layer.cols])
                        {
                            *acc += d * w;
                        }
                    }
                    for (acc, z) in next.iter_mut().zip(below) {
                        if *z <= 0.0 {
                            *acc = 0.0;
                        }
                    }
                    delta = next;
                }
            }
        }
        loss *= scale;

        if self.config.l2 > 0.0 {
            let coef = self.config.l2 * scale;
            for (layer, &base) in self.layers.iter().zip(&offsets) {
                loss += 0.5 * coef * layer.weights.iter().map(|w| w * w).sum::<f64>();
                for (g, w) in grad[base..base + layer.weights.len()].iter_mut().zip(&layer.weights) {
                    *g += coef * w;
                }
            }
        }
        loss
    }
}

/// Clamps negative entries to zero and renormalizes; falls back to the
/// uniform distribution when nothing positive remains.
pub fn project_to_simplex(raw: &[f64]) -> ProbDist {
    let clamped: Vec<f64> = raw
        .iter()
        .map(|v| if v.is_finite() { v.max(0.0) } else { 0.0 })
        .collect();
    ProbDist::from_weights(&clamped).unwrap_or_else(|_| ProbDist::uniform(raw.len()))
}

/// A trained network plus its per-epoch training objective.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MlpModel,
    pub loss_curve: Vec<f64>,
}

/// Trains a network on `features` (N rows of dimension D).
pub fn train_mlp(features: &[Vec<f64>], targets: Targets<'_>, config: &MlpConfig) -> Result<MlpModel> {
    train_mlp_with_history(features, targets, config).map(|o| o.model)
}

pub fn train_mlp_with_history(features: &[Vec<f64>], targets: Targets<'_>, config: &MlpConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let input_dim = features.first().map(Vec::len).ok_or(Error::EmptyInput)?;
    let output_dim = targets.output_dim()?;
    if input_dim == 0 || output_dim == 0 {
        return Err(Error::ShapeMismatch(
            "input and output dimensions must be positive".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = MlpModel::init_with(config.clone(), input_dim, output_dim, &mut rng);
    let dense = model.check_training_data(features, targets)?;

    let n = features.len();
    let batch_size = config.batch_size.min(n);
    let n_params = model.num_params();
    let mut params = model.params();
    let mut m = vec![0.0; n_params];
    let mut v = vec![0.0; n_params];
    let mut grad = vec![0.0; n_params];
    let mut step: i32 = 0;

    let mut order: Vec<usize> = (0..n).collect();
    let mut loss_curve = Vec::new();
    let mut best = f64::INFINITY;
    let mut stale = 0usize;

    for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let loss = model.batch_loss_grad(features, &dense, batch, &mut grad);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    last_finite: loss_curve.last().copied(),
                });
            }
            epoch_loss += loss * batch.len() as f64;

            step += 1;
            let lr_t = config.learning_rate * (1.0 - ADAM_BETA2.powi(step)).sqrt() / (1.0 - ADAM_BETA1.powi(step));
            for i in 0..n_params {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * grad[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
                params[i] -= lr_t * m[i] / (v[i].sqrt() + ADAM_EPS);
            }
            model.set_params(&params).expect("parameter count is fixed");
        }
        let epoch_loss = epoch_loss / n as f64;
        if !epoch_loss.is_finite() || params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFiniteLoss {
                epoch,
                last_finite: loss_curve.last().copied(),
            });
        }
        loss_curve.push(epoch_loss);

        if config.tol > 0.0 {
            if epoch_loss > best - config.tol {
                stale += 1;
            } else {
                stale = 0;
            }
            best = best.min(epoch_loss);
            if stale > config.n_iter_no_change {
                log::debug!("converged after {} epochs (loss {epoch_loss:.6})", epoch + 1);
                break;
            }
        }
    }
    Ok(TrainOutcome { model, loss_curve })
}
