//! Trainable models and the SGD loop.
//!
//! The built-in model is a one-hidden-layer perceptron with a `tanh` hidden
//! activation and a softmax output trained on mean cross-entropy. With
//! `hidden_dim == 0` it degenerates to multinomial logistic regression.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetShard;
use crate::error::ModelError;
use crate::params::{Layout, ParameterVector};
use crate::rng;

/// A borrowed mini-batch.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    inputs: Vec<&'a [f64]>,
    labels: Vec<usize>,
}

impl<'a> Batch<'a> {
    pub fn new(inputs: Vec<&'a [f64]>, labels: Vec<usize>) -> Result<Self, ModelError> {
        if inputs.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        if inputs.len() != labels.len() {
            return Err(ModelError::DimensionMismatch {
                what: "batch labels",
                expected: inputs.len(),
                found: labels.len(),
            });
        }
        Ok(Batch { inputs, labels })
    }

    pub(crate) fn from_parts(inputs: Vec<&'a [f64]>, labels: Vec<usize>) -> Self {
        Batch { inputs, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs(&self) -> &[&'a [f64]] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Width of the tanh hidden layer; 0 selects softmax regression.
    pub hidden_dim: usize,
    pub class_count: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0 {
            return Err(ModelError::InvalidConfig(
                "input_dim must be positive".into(),
            ));
        }
        if self.class_count < 2 {
            return Err(ModelError::InvalidConfig(
                "class_count must be at least 2".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(ModelError::InvalidConfig(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        let (i, h, c) = (self.input_dim, self.hidden_dim, self.class_count);
        if h == 0 {
            Layout::from_sizes([("output.weight", c * i), ("output.bias", c)])
        } else {
            Layout::from_sizes([
                ("hidden.weight", h * i),
                ("hidden.bias", h),
                ("output.weight", c * h),
                ("output.bias", c),
            ])
        }
    }
}

/// Seeded initial weights: each weight matrix uniform in `(-s, s)` with
/// `s = 1/sqrt(fan_in)`, biases zero.
pub fn init_weights(config: &ModelConfig) -> Result<ParameterVector, ModelError> {
    config.validate()?;
    let layout = Arc::new(config.layout());
    let mut weights = ParameterVector::zeros(Arc::clone(&layout));
    let mut rng = rng::stream(config.seed, &[rng::TAG_INIT]);
    let fan_in = |name: &str| {
        if name.starts_with("hidden") || config.hidden_dim == 0 {
            config.input_dim
        } else {
            config.hidden_dim
        }
    };
    let values = weights.values_mut();
    for seg in layout.segments() {
        if !seg.name.ends_with(".weight") {
            continue;
        }
        let s = 1.0 / (fan_in(&seg.name) as f64).sqrt();
        for v in &mut values[seg.offset..seg.offset + seg.len] {
            *v = rng.random_range(-s..s);
        }
    }
    Ok(weights)
}

/// Anything that can be trained by the SGD routines in this module.
pub trait TrainableModel {
    fn weights(&self) -> &ParameterVector;

    /// Replaces the weights. The layout must match the current one.
    fn set_weights(&mut self, weights: ParameterVector) -> Result<(), ModelError>;

    fn learning_rate(&self) -> f64;

    /// Mean loss over the batch and its gradient with respect to the weights.
    fn loss_and_gradient(&self, batch: &Batch<'_>) -> Result<(f64, ParameterVector), ModelError>;

    /// Mean loss without the gradient.
    fn loss(&self, batch: &Batch<'_>) -> Result<f64, ModelError> {
        self.loss_and_gradient(batch).map(|(l, _)| l)
    }

    /// Predicted class; ties go to the lowest index.
    fn predict(&self, input: &[f64]) -> usize;
}

/// The built-in perceptron.
#[derive(Debug, Clone)]
pub struct Mlp {
    config: ModelConfig,
    weights: ParameterVector,
}

impl Mlp {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        let weights = init_weights(&config)?;
        Ok(Mlp { config, weights })
    }

    pub fn with_weights(config: ModelConfig, weights: ParameterVector) -> Result<Self, ModelError> {
        config.validate()?;
        if *weights.layout().as_ref() != config.layout() {
            return Err(ModelError::LayoutMismatch);
        }
        Ok(Mlp { config, weights })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn check_batch(&self, batch: &Batch<'_>) -> Result<(), ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        for (x, &y) in batch.inputs.iter().zip(&batch.labels) {
            if x.len() != self.config.input_dim {
                return Err(ModelError::DimensionMismatch {
                    what: "input dimension",
                    expected: self.config.input_dim,
                    found: x.len(),
                });
            }
            if y >= self.config.class_count {
                return Err(ModelError::LabelOutOfRange {
                    label: y,
                    classes: self.config.class_count,
                });
            }
        }
        Ok(())
    }

    /// Hidden activations (empty for softmax regression) and output logits.
    fn forward(&self, x: &[f64], hidden: &mut Vec<f64>, logits: &mut Vec<f64>) {
        let (i_dim, h_dim, c_dim) = (
            self.config.input_dim,
            self.config.hidden_dim,
            self.config.class_count,
        );
        let w = self.weights.values();
        hidden.clear();
        logits.clear();
        let out_in: &[f64] = if h_dim == 0 {
            x
        } else {
            let (w1, rest) = w.split_at(h_dim * i_dim);
            let b1 = &rest[..h_dim];
            for j in 0..h_dim {
                let row = &w1[j * i_dim..(j + 1) * i_dim];
                let z: f64 = b1[j] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                hidden.push(z.tanh());
            }
            hidden
        };
        let out_dim = out_in.len();
        let off = if h_dim == 0 { 0 } else { h_dim * i_dim + h_dim };
        let w2 = &w[off..off + c_dim * out_dim];
        let b2 = &w[off + c_dim * out_dim..off + c_dim * out_dim + c_dim];
        for k in 0..c_dim {
            let row = &w2[k * out_dim..(k + 1) * out_dim];
            logits.push(b2[k] + row.iter().zip(out_in).map(|(a, b)| a * b).sum::<f64>());
        }
    }
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

impl TrainableModel for Mlp {
    fn weights(&self) -> &ParameterVector {
        &self.weights
    }

    fn set_weights(&mut self, weights: ParameterVector) -> Result<(), ModelError> {
        self.weights.check_compatible(&weights)?;
        weights.ensure_finite("set_weights")?;
        self.weights = weights;
        Ok(())
    }

    fn learning_rate(&self) -> f64 {
        self.config.learning_rate
    }

    fn loss_and_gradient(&self, batch: &Batch<'_>) -> Result<(f64, ParameterVector), ModelError> {
        self.check_batch(batch)?;
        let (i_dim, h_dim, c_dim) = (
            self.config.input_dim,
            self.config.hidden_dim,
            self.config.class_count,
        );
        let scale = 1.0 / batch.len() as f64;
        let mut grad = ParameterVector::zeros(Arc::clone(self.weights.layout()));
        let w = self.weights.values();
        let g = grad.values_mut();
        let off = if h_dim == 0 { 0 } else { h_dim * i_dim + h_dim };
        let out_dim = if h_dim == 0 { i_dim } else { h_dim };

        let mut hidden = Vec::with_capacity(h_dim);
        let mut logits = Vec::with_capacity(c_dim);
        let mut dlogits = vec![0.0; c_dim];
        let mut dhidden = vec![0.0; h_dim];
        let mut loss = 0.0;

        for (x, &y) in batch.inputs.iter().zip(&batch.labels) {
            self.forward(x, &mut hidden, &mut logits);
            let lse = log_sum_exp(&logits);
            loss += lse - logits[y];
            for k in 0..c_dim {
                dlogits[k] = ((logits[k] - lse).exp() - f64::from(u8::from(k == y))) * scale;
            }
            let out_in: &[f64] = if h_dim == 0 { x } else { &hidden };
            for k in 0..c_dim {
                let row = &mut g[off + k * out_dim..off + (k + 1) * out_dim];
                for (gw, a) in row.iter_mut().zip(out_in) {
                    *gw += dlogits[k] * a;
                }
                g[off + c_dim * out_dim + k] += dlogits[k];
            }
            if h_dim > 0 {
                for (j, dh) in dhidden.iter_mut().enumerate() {
                    let back: f64 = (0..c_dim)
                        .map(|k| w[off + k * out_dim + j] * dlogits[k])
                        .sum();
                    *dh = back * (1.0 - hidden[j] * hidden[j]);
                }
                for (j, dh) in dhidden.iter().enumerate() {
                    let row = &mut g[j * i_dim..(j + 1) * i_dim];
                    for (gw, a) in row.iter_mut().zip(x.iter()) {
                        *gw += dh * a;
                    }
                    g[h_dim * i_dim + j] += dh;
                }
            }
        }
        let loss = loss * scale;
        if !loss.is_finite() {
            return Err(ModelError::NonFinite {
                context: "loss",
                index: 0,
            });
        }
        grad.ensure_finite("gradient")?;
        Ok((loss, grad))
    }

    fn loss(&self, batch: &Batch<'_>) -> Result<f64, ModelError> {
        self.check_batch(batch)?;
        let mut hidden = Vec::new();
        let mut logits = Vec::new();
        let mut total = 0.0;
        for (x, &y) in batch.inputs.iter().zip(&batch.labels) {
            self.forward(x, &mut hidden, &mut logits);
            total += log_sum_exp(&logits) - logits[y];
        }
        Ok(total / batch.len() as f64)
    }

    fn predict(&self, input: &[f64]) -> usize {
        let mut hidden = Vec::new();
        let mut logits = Vec::new();
        self.forward(input, &mut hidden, &mut logits);
        argmax(&logits)
    }
}

/// One gradient-descent step: `w <- w - lr * grad(mean loss)`.
pub fn sgd_batch_step<'m, M: TrainableModel + ?Sized>(
    model: &'m mut M,
    batch: &Batch<'_>,
) -> Result<&'m ParameterVector, ModelError> {
    let (_, grad) = model.loss_and_gradient(batch)?;
    let mut next = model.weights().clone();
    next.add_scaled(&grad, -model.learning_rate())?;
    model.set_weights(next)?;
    Ok(model.weights())
}

/// Shuffling and batching for [`train_epochs`]. The permutation for epoch
/// `e` is a pure function of `(seed, start_epoch + e)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpochPlan {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub start_epoch: u64,
}

impl EpochPlan {
    pub fn new(epochs: usize, batch_size: usize, seed: u64) -> Self {
        EpochPlan {
            epochs,
            batch_size,
            seed,
            start_epoch: 0,
        }
    }
}

/// Runs mini-batch SGD and returns the weight delta `w_after - w_before`.
///
/// On return the model holds exactly `w_before + delta`.
pub fn train_epochs<M: TrainableModel + ?Sized>(
    model: &mut M,
    shard: &DatasetShard,
    plan: &EpochPlan,
) -> Result<ParameterVector, ModelError> {
    if plan.epochs == 0 {
        return Err(ModelError::ZeroEpochs);
    }
    if shard.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    if plan.batch_size == 0 {
        return Err(ModelError::InvalidConfig(
            "batch_size must be positive".into(),
        ));
    }
    let before = model.weights().clone();
    let mut order: Vec<usize> = (0..shard.len()).collect();
    for e in 0..plan.epochs as u64 {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(
            plan.seed,
            &[rng::TAG_SHUFFLE, plan.start_epoch + e],
        ));
        for chunk in order.chunks(plan.batch_size) {
            sgd_batch_step(model, &shard.batch(chunk))?;
        }
    }
    let delta = model.weights().sub(&before)?;
    model.set_weights(before.add(&delta)?)?;
    Ok(delta)
}

/// Trains a single fresh model on the concatenation of `shards`. This is the
/// idealised all-data baseline that decentralised training aims for.
pub fn centralized_reference_train(
    shards: &[DatasetShard],
    config: &ModelConfig,
    epochs: usize,
    batch_size: usize,
) -> Result<Mlp, ModelError> {
    if shards.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    for s in shards {
        if s.dim() != config.input_dim {
            return Err(ModelError::DimensionMismatch {
                what: "shard dimension",
                expected: config.input_dim,
                found: s.dim(),
            });
        }
    }
    let union =
        DatasetShard::concat(shards).map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
    let mut model = Mlp::new(config.clone())?;
    train_epochs(
        &mut model,
        &union,
        &EpochPlan::new(epochs, batch_size, config.seed),
    )?;
    Ok(model)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

/// Argmax accuracy and mean loss over a dataset.
pub fn evaluate<M: TrainableModel + ?Sized>(
    model: &M,
    dataset: &DatasetShard,
) -> Result<Evaluation, ModelError> {
    if dataset.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let correct = (0..dataset.len())
        .filter(|&i| model.predict(dataset.input(i)) == dataset.labels()[i])
        .count();
    let loss = model.loss(&dataset.as_batch())?;
    Ok(Evaluation {
        accuracy: correct as f64 / dataset.len() as f64,
        loss,
    })
}
