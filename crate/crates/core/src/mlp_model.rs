//! Multi-head ReLU perceptron with hand-written backpropagation.
//!
//! All trainable parameters live in one flat vector so that the update rules
//! can operate on whole-model gradients. Layout, in order:
//!
//! * each hidden layer: weights `out x in` (row-major), then `out` biases;
//! * each task head: weights `classes x last_hidden` (row-major), then
//!   `classes` biases.
//!
//! With no hidden layers every head reads the input directly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gradient_rules::{dot, FlatGradient};
use crate::task_streams::Dataset;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("task {task_id} has no head (model has {heads})")]
    UnknownTask { task_id: usize, heads: usize },
    #[error("label {label} is outside the {classes} classes of a head")]
    InvalidLabel { label: usize, classes: usize },
    #[error("input has {got} features, model expects {expected}")]
    InputDim { expected: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("vector of length {got} does not match {expected} parameters")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("learning rate must be positive, got {0}")]
    InvalidLearningRate(f64),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpArchitecture {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub heads: usize,
    pub classes_per_head: usize,
}

impl MlpArchitecture {
    pub fn new(
        input_dim: usize,
        hidden_dims: Vec<usize>,
        heads: usize,
        classes_per_head: usize,
    ) -> Result<Self> {
        let arch = Self {
            input_dim,
            hidden_dims,
            heads,
            classes_per_head,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.heads == 0 || self.classes_per_head == 0 {
            return Err(ModelError::InvalidArchitecture(format!(
                "input_dim, heads and classes_per_head must be >= 1 (got {}, {}, {})",
                self.input_dim, self.heads, self.classes_per_head
            )));
        }
        if self.hidden_dims.contains(&0) {
            return Err(ModelError::InvalidArchitecture(
                "hidden layer widths must be >= 1".into(),
            ));
        }
        Ok(())
    }

    fn feature_dim(&self) -> usize {
        self.hidden_dims.last().copied().unwrap_or(self.input_dim)
    }

    /// `(fan_in, fan_out)` of each hidden layer.
    fn trunk_shapes(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let ins = std::iter::once(self.input_dim).chain(self.hidden_dims.iter().copied());
        ins.zip(self.hidden_dims.iter().copied())
    }

    fn trunk_len(&self) -> usize {
        self.trunk_shapes().map(|(i, o)| (i + 1) * o).sum()
    }

    fn head_len(&self) -> usize {
        (self.feature_dim() + 1) * self.classes_per_head
    }

    /// Total trainable parameters: the sum of `(in + 1) * out` over layers.
    pub fn parameter_count(&self) -> usize {
        self.trunk_len() + self.heads * self.head_len()
    }
}

/// One labelled input routed to a task head.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub input: &'a [f64],
    pub task_id: usize,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    arch: MlpArchitecture,
    theta: FlatGradient,
    seed: u64,
}

struct Trace {
    /// Input followed by every hidden activation (post-ReLU).
    activations: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

impl Mlp {
    /// Weights uniform in `±sqrt(6 / (fan_in + fan_out))`, biases zero.
    pub fn init(arch: MlpArchitecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = Vec::with_capacity(arch.parameter_count());
        let mut push_layer = |theta: &mut Vec<f64>, fan_in: usize, fan_out: usize| {
            let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
            theta.extend((0..fan_in * fan_out).map(|_| rng.gen_range(-s..s)));
            theta.extend(std::iter::repeat_n(0.0, fan_out));
        };
        for (fan_in, fan_out) in arch.trunk_shapes() {
            push_layer(&mut theta, fan_in, fan_out);
        }
        for _ in 0..arch.heads {
            push_layer(&mut theta, arch.feature_dim(), arch.classes_per_head);
        }
        debug_assert_eq!(theta.len(), arch.parameter_count());
        Ok(Self {
            arch,
            theta: FlatGradient::new(theta),
            seed,
        })
    }

    pub fn from_parameters(arch: MlpArchitecture, theta: FlatGradient, seed: u64) -> Result<Self> {
        arch.validate()?;
        if theta.len() != arch.parameter_count() {
            return Err(ModelError::ShapeMismatch {
                expected: arch.parameter_count(),
                got: theta.len(),
            });
        }
        Ok(Self { arch, theta, seed })
    }

    pub fn architecture(&self) -> &MlpArchitecture {
        &self.arch
    }

    pub fn parameters(&self) -> &FlatGradient {
        &self.theta
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn head_offset(&self, task_id: usize) -> usize {
        self.arch.trunk_len() + (task_id - 1) * self.arch.head_len()
    }

    fn check_example(&self, task_id: usize, input: &[f64]) -> Result<()> {
        if task_id < 1 || task_id > self.arch.heads {
            return Err(ModelError::UnknownTask {
                task_id,
                heads: self.arch.heads,
            });
        }
        if input.len() != self.arch.input_dim {
            return Err(ModelError::InputDim {
                expected: self.arch.input_dim,
                got: input.len(),
            });
        }
        Ok(())
    }

    fn trace(&self, input: &[f64], task_id: usize) -> Trace {
        let theta = self.theta.as_slice();
        let mut activations = Vec::with_capacity(self.arch.hidden_dims.len() + 1);
        activations.push(input.to_vec());
        let mut offset = 0;
        for (fan_in, fan_out) in self.arch.trunk_shapes() {
            let prev = activations.last().unwrap();
            let weights = &theta[offset..offset + fan_in * fan_out];
            let bias = &theta[offset + fan_in * fan_out..offset + (fan_in + 1) * fan_out];
            let next: Vec<f64> = (0..fan_out)
                .map(|o| (dot(&weights[o * fan_in..(o + 1) * fan_in], prev) + bias[o]).max(0.0))
                .collect();
            activations.push(next);
            offset += (fan_in + 1) * fan_out;
        }
        let features = activations.last().unwrap();
        let f = self.arch.feature_dim();
        let c = self.arch.classes_per_head;
        let head = self.head_offset(task_id);
        let weights = &theta[head..head + f * c];
        let bias = &theta[head + f * c..head + (f + 1) * c];
        let logits = (0..c)
            .map(|k| dot(&weights[k * f..(k + 1) * f], features) + bias[k])
            .collect();
        Trace {
            activations,
            logits,
        }
    }

    /// Logits of the head belonging to `task_id` (1-based).
    pub fn forward(&self, input: &[f64], task_id: usize) -> Result<Vec<f64>> {
        self.check_example(task_id, input)?;
        Ok(self.trace(input, task_id).logits)
    }

    /// Mean cross-entropy over the batch and its exact gradient.
    pub fn loss_and_grad(&self, batch: &[Example<'_>]) -> Result<(f64, FlatGradient)> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let classes = self.arch.classes_per_head;
        for ex in batch {
            self.check_example(ex.task_id, ex.input)?;
            if ex.label >= classes {
                return Err(ModelError::InvalidLabel {
                    label: ex.label,
                    classes,
                });
            }
        }
        let theta = self.theta.as_slice();
        let mut grad = vec![0.0; theta.len()];
        let mut total_loss = 0.0;
        let f = self.arch.feature_dim();
        let shapes: Vec<(usize, usize)> = self.arch.trunk_shapes().collect();
        let mut offsets = Vec::with_capacity(shapes.len());
        let mut acc = 0;
        for &(i, o) in &shapes {
            offsets.push(acc);
            acc += (i + 1) * o;
        }

        for ex in batch {
            let trace = self.trace(ex.input, ex.task_id);
            let (loss, mut delta) = softmax_cross_entropy(&trace.logits, ex.label);
            total_loss += loss;

            // head
            let head = self.head_offset(ex.task_id);
            let features = trace.activations.last().unwrap();
            for k in 0..classes {
                let row = &mut grad[head + k * f..head + (k + 1) * f];
                for (gw, &a) in row.iter_mut().zip(features) {
                    *gw += delta[k] * a;
                }
                grad[head + f * classes + k] += delta[k];
            }
            let head_weights = &theta[head..head + f * classes];
            let mut upstream = vec![0.0; f];
            for k in 0..classes {
                for (u, &w) in upstream.iter_mut().zip(&head_weights[k * f..(k + 1) * f]) {
                    *u += delta[k] * w;
                }
            }

            // trunk, last layer first
            for layer in (0..shapes.len()).rev() {
                let (fan_in, fan_out) = shapes[layer];
                let out_act = &trace.activations[layer + 1];
                let in_act = &trace.activations[layer];
                delta = upstream
                    .iter()
                    .zip(out_act)
                    .map(|(&u, &a)| if a > 0.0 { u } else { 0.0 })
                    .collect();
                let off = offsets[layer];
                for o in 0..fan_out {
                    if delta[o] == 0.0 {
                        continue;
                    }
                    let row = &mut grad[off + o * fan_in..off + (o + 1) * fan_in];
                    for (gw, &a) in row.iter_mut().zip(in_act) {
                        *gw += delta[o] * a;
                    }
                    grad[off + fan_in * fan_out + o] += delta[o];
                }
                if layer > 0 {
                    let weights = &theta[off..off + fan_in * fan_out];
                    upstream = vec![0.0; fan_in];
                    for o in 0..fan_out {
                        if delta[o] == 0.0 {
                            continue;
                        }
                        for (u, &w) in upstream
                            .iter_mut()
                            .zip(&weights[o * fan_in..(o + 1) * fan_in])
                        {
                            *u += delta[o] * w;
                        }
                    }
                }
            }
        }

        let n = batch.len() as f64;
        for g in &mut grad {
            *g /= n;
        }
        Ok((total_loss / n, FlatGradient::new(grad)))
    }

    /// `theta <- theta - lr * g_tilde`
    pub fn sgd_step(&mut self, g_tilde: &FlatGradient, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(ModelError::InvalidLearningRate(lr));
        }
        if g_tilde.len() != self.theta.len() {
            return Err(ModelError::ShapeMismatch {
                expected: self.theta.len(),
                got: g_tilde.len(),
            });
        }
        for (p, g) in self.theta.as_mut_slice().iter_mut().zip(g_tilde.iter()) {
            *p -= lr * g;
        }
        Ok(())
    }

    /// Predicted class; ties go to the lowest index.
    pub fn predict(&self, input: &[f64], task_id: usize) -> Result<usize> {
        let logits = self.forward(input, task_id)?;
        Ok(argmax(&logits))
    }

    /// Fraction of samples whose argmax prediction matches the label.
    pub fn evaluate(&self, data: &Dataset, task_id: usize) -> Result<f64> {
        if data.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        let mut correct = 0usize;
        for (input, &label) in data.inputs.iter().zip(&data.labels) {
            if self.predict(input, task_id)? == label {
                correct += 1;
            }
        }
        Ok(correct as f64 / data.len() as f64)
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Loss and gradient with respect to the logits.
fn softmax_cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + max - logits[label];
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    (loss, grad)
}
