//! Minibatch SGD with momentum and weight decay.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layer::LayerParams;
use crate::model::{argmax, Logits, Model};
use crate::tensor::{Scalar, Tensor};

/// Samples per forward pass when only inference is needed.
pub(crate) const EVAL_BATCH: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub seed: u64,
    /// Epochs (0-based) at which the learning rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            lr_milestones: vec![20, 25],
            lr_decay: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, dataset_len: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("train config: {m}")));
        if self.batch_size == 0 || self.batch_size > dataset_len {
            return bad("batch_size must be in 1..=dataset size");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be positive");
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return bad("momentum must be in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return bad("weight_decay must be non-negative");
        }
        if !(self.lr_decay > 0.0) {
            return bad("lr_decay must be positive");
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f32 {
        let drops = self.lr_milestones.iter().filter(|&&m| epoch >= m).count();
        let mut lr = self.learning_rate;
        for _ in 0..drops {
            lr *= self.lr_decay;
        }
        lr
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

/// Batch-mean softmax cross-entropy on raw logits and its gradient
/// `(softmax(z) − onehot(y)) / N`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Logits<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let n = logits.num_samples();
    let classes = logits.num_classes();
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            context: "softmax_cross_entropy labels".into(),
            expected: vec![n],
            actual: vec![labels.len()],
        });
    }
    let inv_n = T::one() / T::lit(n as f64);
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(n * classes);
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::InvalidArgument(format!("label {label} outside 0..{classes}")));
        }
        let z = logits.sample(i);
        let max = z.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = z.iter().map(|&v| (v - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        loss = loss + (total.ln() - (z[label] - max));
        for (c, &e) in exps.iter().enumerate() {
            let p = e / total;
            let target = if c == label { T::one() } else { T::zero() };
            grad.push((p - target) * inv_n);
        }
    }
    Ok((loss * inv_n, Tensor::from_parts(vec![n, classes], grad)))
}

/// Fraction of samples whose argmax logit (ties to the lowest class) equals the label.
pub fn test_accuracy<T: Scalar>(model: &Model<T>, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let preds = predict(model, dataset)?;
    let correct = preds.iter().zip(dataset.labels()).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / dataset.len() as f64)
}

/// Argmax class of every sample in dataset order.
pub fn predict<T: Scalar>(model: &Model<T>, dataset: &Dataset) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(dataset.len());
    let all: Vec<usize> = (0..dataset.len()).collect();
    for chunk in all.chunks(EVAL_BATCH) {
        let batch: Tensor<T> = dataset.batch(chunk).cast();
        let logits = model.forward_logits(&batch)?;
        preds.extend((0..chunk.len()).map(|i| argmax(logits.sample(i))));
    }
    Ok(preds)
}

/// Train with SGD; see [`train_with_observer`].
pub fn train(model: &Model<f32>, train_set: &Dataset, test_set: &Dataset, config: &TrainConfig) -> Result<(Model<f32>, TrainHistory)> {
    train_with_observer(model, train_set, test_set, config, |_| {})
}

/// SGD with momentum (`v ← μv + g + λw`, `w ← w − lr·v`) and a seeded
/// reshuffle every epoch. `observe` is called after each epoch.
pub fn train_with_observer(
    model: &Model<f32>,
    train_set: &Dataset,
    test_set: &Dataset,
    config: &TrainConfig,
    mut observe: impl FnMut(&EpochStats),
) -> Result<(Model<f32>, TrainHistory)> {
    let mut model = model.clone();
    let mut history = TrainHistory::default();
    if config.epochs == 0 {
        return Ok((model, history));
    }
    config.validate(train_set.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut velocity: Vec<Option<LayerParams<f32>>> =
        model.params().iter().map(|p| p.as_ref().map(LayerParams::zeros_like)).collect();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let end = model.arch().layers.len();

    for epoch in 0..config.epochs {
        let lr = config.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0f64;
        let mut batches = 0usize;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch = train_set.batch(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| train_set.labels()[i]).collect();
            let (out, caches) = model.forward_trace(&batch, end).map_err(|e| match e {
                Error::NonFinite { .. } => Error::Diverged { epoch, step },
                other => other,
            })?;
            let (loss, grad) = softmax_cross_entropy(&Logits(out), &labels)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step });
            }
            let (_, grads) = model
                .backward_trace(&caches, grad, 0, true, |_, _| {})
                .map_err(|_| Error::Diverged { epoch, step })?;
            sgd_step(&mut model, &mut velocity, &grads, lr, config.momentum, config.weight_decay);
            loss_sum += loss as f64;
            batches += 1;
        }
        let stats = EpochStats { epoch, loss: loss_sum / batches as f64, test_accuracy: test_accuracy(&model, test_set)? };
        observe(&stats);
        history.epochs.push(stats);
    }
    Ok((model, history))
}

fn sgd_step(
    model: &mut Model<f32>,
    velocity: &mut [Option<LayerParams<f32>>],
    grads: &[Option<LayerParams<f32>>],
    lr: f32,
    momentum: f32,
    weight_decay: f32,
) {
    for ((p, v), g) in model.params_mut().iter_mut().zip(velocity.iter_mut()).zip(grads) {
        let (Some(p), Some(v), Some(g)) = (p.as_mut(), v.as_mut(), g.as_ref()) else {
            continue;
        };
        for (w, (vel, grad)) in [(&mut p.weight, (&mut v.weight, &g.weight)), (&mut p.bias, (&mut v.bias, &g.bias))] {
            for ((wi, vi), &gi) in w.data_mut().iter_mut().zip(vel.data_mut().iter_mut()).zip(grad.data()) {
                *vi = momentum * *vi + gi + weight_decay * *wi;
                *wi -= lr * *vi;
            }
        }
    }
}
