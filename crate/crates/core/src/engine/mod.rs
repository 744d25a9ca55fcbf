//! Training and inference engine.
//!
//! The engine is deliberately small: forward and reverse passes for the six
//! layer kinds, softmax cross-entropy, and classical momentum SGD
//! (`v ← μ·v − η·g`, `w ← w + v`). A training run is single-threaded, so two
//! runs with the same seed produce bitwise-identical weights.

mod gradcheck;
mod network;
mod ops;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::tensor::{DType, Scalar, Tensor};

pub use gradcheck::{grad_check, GradCheckReport};
pub use network::{Mode, Network, ParamGrad};

const EVAL_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub bn_stat_momentum: f64,
    pub seed: u64,
    pub precision: DType,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            batch_size: 128,
            max_epochs: 100,
            learning_rate: 0.01,
            momentum: 0.9,
            bn_stat_momentum: 0.9,
            seed: 0,
            precision: DType::F32,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must be in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.bn_stat_momentum) {
            return Err(Error::invalid("bn_stat_momentum must be in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub val_loss: f64,
    pub epoch_wall_seconds: f64,
    pub per_step_wall_seconds: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

/// Runs `graph` on `inputs` (`[N, H, W, C]`). In [`Mode::Train`] batch norm
/// uses batch statistics and the moving statistics in `graph` are updated.
pub fn forward(graph: &mut ModelGraph, inputs: &Tensor, mode: Mode) -> Result<Tensor> {
    let mut net = Network::<f32>::from_graph(graph)?;
    let out = net.forward(inputs, mode)?;
    if mode == Mode::Train {
        net.write_to(graph);
    }
    Ok(out)
}

/// Inference-mode logits; never mutates the graph.
pub fn infer(graph: &ModelGraph, inputs: &Tensor) -> Result<Tensor> {
    Network::<f32>::from_graph(graph)?.forward(inputs, Mode::Infer)
}

/// Mean softmax cross-entropy of a batch and the gradient of every trainable
/// tensor, computed in precision `T` with batch statistics.
pub fn loss_and_grads<T: Scalar>(graph: &ModelGraph, inputs: &Tensor<T>, labels: &[u32]) -> Result<(T, Vec<ParamGrad<T>>)> {
    Network::<T>::from_graph(graph)?.loss_and_grads(inputs, labels)
}

/// One classical momentum step: `v ← momentum·v − lr·g`, `w ← w + v`.
pub fn sgd_momentum_step<T: Scalar>(weights: &mut Tensor<T>, grads: &Tensor<T>, velocity: &mut Tensor<T>, lr: T, momentum: T) -> Result<()> {
    if weights.shape() != grads.shape() || weights.shape() != velocity.shape() {
        return Err(Error::invalid(format!(
            "shape mismatch: weights {:?}, grads {:?}, velocity {:?}",
            weights.shape(),
            grads.shape(),
            velocity.shape()
        )));
    }
    sgd_update(weights.data_mut(), grads.data(), velocity.data_mut(), lr, momentum);
    Ok(())
}

fn sgd_update<T: Scalar>(w: &mut [T], g: &[T], v: &mut [T], lr: T, momentum: T) {
    for ((w, g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = momentum * *v - lr * *g;
        *w = *w + *v;
    }
}

/// Optimizer state bound to one network.
pub struct Trainer<T> {
    pub net: Network<T>,
    velocity: Vec<Vec<T>>,
    lr: T,
    momentum: T,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(graph: &ModelGraph, hp: &Hyperparams) -> Result<Self> {
        hp.validate()?;
        let mut net = Network::<T>::from_graph(graph)?;
        net.set_bn_momentum(hp.bn_stat_momentum);
        let velocity = net.params_mut().iter().map(|p| vec![T::zero(); p.len()]).collect();
        Ok(Self {
            net,
            velocity,
            lr: T::from_f64(hp.learning_rate),
            momentum: T::from_f64(hp.momentum),
        })
    }

    /// Forward, backward and update on one batch. Returns `(loss, correct)`.
    pub fn step(&mut self, x: &[T], labels: &[u32]) -> Result<(T, usize)> {
        let (loss, correct, grads) = self.net.loss_and_grads_raw(x, labels, true)?;
        let flat: Vec<Vec<T>> = grads.into_iter().flatten().flat_map(|(a, b)| [a, b]).collect();
        let (lr, momentum) = (self.lr, self.momentum);
        for ((w, g), v) in self.net.params_mut().into_iter().zip(&flat).zip(&mut self.velocity) {
            sgd_update(w, g, v, lr, momentum);
        }
        Ok((loss, correct))
    }
}

/// Trains a copy of `graph` for `hp.max_epochs` epochs of seeded, shuffled
/// mini-batch SGD. The last partial batch of an epoch is kept.
pub fn train(graph: &ModelGraph, train_set: &Dataset, val_set: &Dataset, hp: &Hyperparams) -> Result<(ModelGraph, TrainLog)> {
    match hp.precision {
        DType::F32 => train_in::<f32>(graph, train_set, val_set, hp),
        DType::F64 => train_in::<f64>(graph, train_set, val_set, hp),
    }
}

fn train_in<T: Scalar>(graph: &ModelGraph, train_set: &Dataset, val_set: &Dataset, hp: &Hyperparams) -> Result<(ModelGraph, TrainLog)> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid("training and validation sets must be non-empty"));
    }
    for set in [train_set, val_set] {
        if set.shape != graph.input_shape {
            return Err(Error::invalid(format!(
                "dataset samples are {:?}, model expects {:?}",
                set.shape, graph.input_shape
            )));
        }
    }
    let mut trainer = Trainer::<T>::new(graph, hp)?;
    let mut log = TrainLog::default();
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let per = train_set.sample_len();
    let mut batch_x: Vec<T> = Vec::with_capacity(hp.batch_size * per);
    let mut batch_y: Vec<u32> = Vec::with_capacity(hp.batch_size);

    for epoch in 0..hp.max_epochs {
        let epoch_start = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        let mut steps = Vec::new();
        for idx in order.chunks(hp.batch_size) {
            batch_x.clear();
            batch_y.clear();
            for &i in idx {
                batch_x.extend(train_set.sample(i).iter().map(|&v| T::from_f32(v)));
                batch_y.push(train_set.labels[i]);
            }
            let t0 = Instant::now();
            let (loss, c) = trainer.step(&batch_x, &batch_y)?;
            steps.push(t0.elapsed().as_secs_f64());
            let loss = loss.to_f64();
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("loss became {loss} in epoch {}", epoch + 1)));
            }
            loss_sum += loss * idx.len() as f64;
            correct += c;
        }
        let (val_accuracy, val_loss) = evaluate_net(&mut trainer.net, val_set);
        log.epochs.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / train_set.len() as f64,
            train_accuracy: correct as f64 / train_set.len() as f64,
            val_accuracy,
            val_loss,
            epoch_wall_seconds: epoch_start.elapsed().as_secs_f64(),
            per_step_wall_seconds: steps,
        });
        log::debug!(
            "epoch {} loss {:.4} train acc {:.3} val acc {:.3}",
            epoch + 1,
            loss_sum / train_set.len() as f64,
            correct as f64 / train_set.len() as f64,
            val_accuracy
        );
    }
    let mut trained = graph.clone();
    trainer.net.write_to(&mut trained);
    if trained.layers.iter().any(|l| l.weights().iter().any(|(_, t)| !t.is_finite())) {
        return Err(Error::Numerical("trained weights are not finite".into()));
    }
    Ok((trained, log))
}

fn evaluate_net<T: Scalar>(net: &mut Network<T>, set: &Dataset) -> (f64, f64) {
    let x: Vec<T> = set.images.iter().map(|&v| T::from_f32(v)).collect();
    let logits = net.infer_batched(&x, set.len(), EVAL_CHUNK);
    let classes = net.num_classes();
    let (loss, _, correct) = ops::softmax_cross_entropy(&logits, &set.labels, classes);
    (correct as f64 / set.len() as f64, loss.to_f64())
}

/// Fraction of samples whose inference-mode argmax equals the label.
pub fn evaluate(graph: &ModelGraph, set: &Dataset) -> Result<f64> {
    Ok(evaluate_with_loss(graph, set)?.0)
}

/// Accuracy and mean cross-entropy in inference mode.
pub fn evaluate_with_loss(graph: &ModelGraph, set: &Dataset) -> Result<(f64, f64)> {
    if set.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    if set.shape != graph.input_shape {
        return Err(Error::invalid(format!(
            "dataset samples are {:?}, model expects {:?}",
            set.shape, graph.input_shape
        )));
    }
    if let Some(bad) = set.labels.iter().find(|&&l| l as usize >= graph.num_classes) {
        return Err(Error::invalid(format!("label {bad} out of range")));
    }
    let mut net = Network::<f32>::from_graph(graph)?;
    Ok(evaluate_net(&mut net, set))
}

/// Inference-mode argmax per sample.
pub fn predict(graph: &ModelGraph, set: &Dataset) -> Result<Vec<u32>> {
    let mut net = Network::<f32>::from_graph(graph)?;
    let logits = net.infer_batched(&set.images, set.len(), EVAL_CHUNK);
    Ok(logits
        .chunks_exact(graph.num_classes)
        .map(|row| ops::argmax(row) as u32)
        .collect())
}
