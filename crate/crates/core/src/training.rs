//! Cross-entropy loss, the Adam optimizer and the epoch/fit loops.

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::data::{batch_indices, DataError, LabeledDataset, SplitDataset};
use crate::model::{argmax_rows, ModelError, NetworkModel, SplitRecord, NUM_CLASSES};
use crate::seed::{rng_for, Stream};
use crate::tensor::{Scalar, Tensor, TensorError};

/// Samples per independently processed slice of a training batch. Fixed, so
/// the gradient reduction order never depends on the thread count.
pub const TRAIN_CHUNK: usize = 16;

/// Lower clip applied to probabilities before taking the log.
pub const LOG_CLIP: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("label {0} is outside 0-9")]
    InvalidLabel(u8),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("non-finite {what} in epoch {epoch}")]
    NonFinite { what: &'static str, epoch: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub dropout_rate: f64,
    pub seed: u64,
    pub train_count: usize,
    pub val_count: usize,
    /// Take the first `train_count` rows for training and the next
    /// `val_count` for validation instead of a seeded shuffle.
    pub sequential_split: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 64,
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            dropout_rate: 0.3,
            seed: 0,
            train_count: 33_600,
            val_count: 8_400,
            sequential_split: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::InvalidConfig(msg));
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning rate must be a finite non-negative number, got {}",
                self.learning_rate
            ));
        }
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(beta > 0.0 && beta < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {beta}"));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        if self.train_count == 0 || self.val_count == 0 {
            return bad("train and validation counts must be positive".into());
        }
        Ok(())
    }

    pub fn split_record(&self) -> SplitRecord {
        SplitRecord {
            train_count: self.train_count,
            val_count: self.val_count,
            sequential: self.sequential_split,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

/// Adam moments for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Scalar = f32> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(shape: &[usize]) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            t: 0,
        }
    }
}

pub fn one_hot_encode<T: Scalar>(label: u8) -> Result<Tensor<T>, TrainError> {
    if label as usize >= NUM_CLASSES {
        return Err(TrainError::InvalidLabel(label));
    }
    Ok(Tensor::from_fn(&[NUM_CLASSES], |i| {
        if i == label as usize {
            T::one()
        } else {
            T::zero()
        }
    }))
}

/// `-sum_i target_i * ln(clip(probs_i, 1e-12, 1))` for one sample.
pub fn cross_entropy<T: Scalar>(probs: &Tensor<T>, target: &Tensor<T>) -> Result<f64, TrainError> {
    target.expect_shape("cross_entropy", probs.shape())?;
    Ok(probs
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let p = p.to_f64().unwrap_or(0.0).clamp(LOG_CLIP, 1.0);
            -t.to_f64().unwrap_or(0.0) * p.ln()
        })
        .sum())
}

/// Mean cross-entropy over `(B, 10)` probabilities and integer labels.
pub fn batch_cross_entropy<T: Scalar>(probs: &Tensor<T>, labels: &[u8]) -> Result<f64, TrainError> {
    Ok(cross_entropy_sum(probs, labels)? / labels.len().max(1) as f64)
}

fn cross_entropy_sum<T: Scalar>(probs: &Tensor<T>, labels: &[u8]) -> Result<f64, TrainError> {
    probs.expect_shape("cross_entropy", &[labels.len(), NUM_CLASSES])?;
    let mut total = 0.0;
    for (row, &label) in probs.data().chunks_exact(NUM_CLASSES).zip(labels) {
        if label as usize >= NUM_CLASSES {
            return Err(TrainError::InvalidLabel(label));
        }
        total -= row[label as usize].to_f64().unwrap_or(0.0).clamp(LOG_CLIP, 1.0).ln();
    }
    Ok(total)
}

/// Gradient of `cross_entropy(softmax(z), target)` with respect to `z`.
pub fn output_gradient<T: Scalar>(probs: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>, TrainError> {
    Ok(probs.add(&target.scale(-T::one()))?)
}

/// `(probs - onehot) / scale` for a `(B, 10)` batch.
fn batch_output_gradient<T: Scalar>(probs: &Tensor<T>, labels: &[u8], scale: usize) -> Tensor<T> {
    let inv = T::one() / T::from_usize(scale).expect("batch size fits");
    let mut grad = probs.clone();
    for (row, &label) in grad.data_mut().chunks_exact_mut(NUM_CLASSES).zip(labels) {
        row[label as usize] = row[label as usize] - T::one();
        for g in row.iter_mut() {
            *g = *g * inv;
        }
    }
    grad
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    grad.expect_shape("adam_step", param.shape())?;
    state.m.expect_shape("adam_step", param.shape())?;
    state.v.expect_shape("adam_step", param.shape())?;
    state.t += 1;
    let t = state.t as i32;
    let b1 = T::from_f64_lossy(cfg.beta1);
    let b2 = T::from_f64_lossy(cfg.beta2);
    let lr = T::from_f64_lossy(cfg.learning_rate);
    let eps = T::from_f64_lossy(cfg.epsilon);
    let correct1 = T::from_f64_lossy(1.0 - cfg.beta1.powi(t));
    let correct2 = T::from_f64_lossy(1.0 - cfg.beta2.powi(t));
    let one = T::one();

    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / correct1;
        let v_hat = *v / correct2;
        *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Loss, accuracy and predictions of an inference pass over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub predictions: Vec<u8>,
}

pub fn evaluate<T: Scalar>(model: &NetworkModel<T>, ds: &LabeledDataset) -> Result<Evaluation, TrainError> {
    let labels = ds.require_labels()?;
    let probs = model.probabilities(&ds.images().cast::<T>())?;
    let loss = batch_cross_entropy(&probs, labels)?;
    let predictions = argmax_rows(&probs);
    let correct = predictions.iter().zip(labels).filter(|(p, t)| p == t).count();
    Ok(Evaluation {
        loss,
        accuracy: correct as f64 / labels.len() as f64,
        predictions,
    })
}

struct ChunkOutcome<T: Scalar> {
    loss_sum: f64,
    correct: usize,
    grads: Vec<Tensor<T>>,
}

/// One pass over shuffled training batches followed by a validation pass.
///
/// `epoch` is 0-based and selects the shuffle and dropout streams of
/// `cfg.seed`. Training loss/accuracy are accumulated over the training-mode
/// batches as they are processed.
pub fn train_epoch<T: Scalar>(
    model: &mut NetworkModel<T>,
    train: &LabeledDataset,
    val: &LabeledDataset,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochMetrics, TrainError> {
    cfg.validate()?;
    let labels = train.require_labels()?;
    let shuffle_seed = rng_for(cfg.seed, Stream::Shuffle { epoch }).random::<u64>();
    let batches = batch_indices(train.len(), cfg.batch_size, true, shuffle_seed)?;

    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for (batch_no, batch) in batches.iter().enumerate() {
        let shared: &NetworkModel<T> = model;
        let outcomes = batch
            .par_chunks(TRAIN_CHUNK)
            .enumerate()
            .map(|(chunk_no, indices)| -> Result<ChunkOutcome<T>, TrainError> {
                let images = train.gather_images(indices).cast::<T>();
                let chunk_labels: Vec<u8> = indices.iter().map(|&i| labels[i]).collect();
                let mut rng = rng_for(
                    cfg.seed,
                    Stream::Dropout {
                        epoch,
                        batch: batch_no,
                        chunk: chunk_no,
                    },
                );
                let (probs, trace) = shared.forward_trace(&images, &mut rng)?;
                let loss_sum = cross_entropy_sum(&probs, &chunk_labels)?;
                let correct = argmax_rows(&probs)
                    .iter()
                    .zip(&chunk_labels)
                    .filter(|(p, t)| p == t)
                    .count();
                let grad = batch_output_gradient(&probs, &chunk_labels, batch.len());
                let grads = shared.backward(&trace, &grad)?;
                Ok(ChunkOutcome {
                    loss_sum,
                    correct,
                    grads,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;

        let mut outcomes = outcomes.into_iter();
        let first = outcomes.next().expect("batches are non-empty");
        let mut grads = first.grads;
        loss_sum += first.loss_sum;
        correct += first.correct;
        for outcome in outcomes {
            loss_sum += outcome.loss_sum;
            correct += outcome.correct;
            for (acc, g) in grads.iter_mut().zip(&outcome.grads) {
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + b;
                }
            }
        }
        if !loss_sum.is_finite() || grads.iter().any(|g| !g.all_finite()) {
            return Err(TrainError::NonFinite {
                what: "loss or gradient",
                epoch: epoch + 1,
            });
        }

        let (params, states) = model.parameters_with_state_mut();
        for ((param, grad), state) in params.into_iter().zip(&grads).zip(states.iter_mut()) {
            adam_step(param, grad, state, cfg)?;
        }
    }

    let eval = evaluate(model, val)?;
    if !eval.loss.is_finite() {
        return Err(TrainError::NonFinite {
            what: "validation loss",
            epoch: epoch + 1,
        });
    }
    Ok(EpochMetrics {
        epoch: epoch + 1,
        train_loss: loss_sum / train.len() as f64,
        train_accuracy: correct as f64 / train.len() as f64,
        val_loss: eval.loss,
        val_accuracy: eval.accuracy,
    })
}

/// The train/validation split a configuration selects.
pub fn split_for(ds: &LabeledDataset, split: SplitRecord, seed: u64) -> Result<SplitDataset, TrainError> {
    Ok(if split.sequential {
        ds.split_sequential(split.train_count, split.val_count)?
    } else {
        let split_seed = rng_for(seed, Stream::Split).random::<u64>();
        ds.split(split.train_count, split.val_count, split_seed)?
    })
}

/// Splits `data` per `cfg` and trains for `cfg.epochs` epochs.
pub fn fit<T: Scalar>(
    model: &mut NetworkModel<T>,
    data: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<Vec<EpochMetrics>, TrainError> {
    fit_with_progress(model, data, cfg, |_| {})
}

/// [`fit`], calling `on_epoch` after every completed epoch.
pub fn fit_with_progress<T: Scalar>(
    model: &mut NetworkModel<T>,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>, TrainError> {
    cfg.validate()?;
    if cfg.epochs == 0 {
        return Ok(Vec::new());
    }
    let split = split_for(data, cfg.split_record(), cfg.seed)?;
    model.set_split(cfg.split_record());
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let metrics = train_epoch(model, &split.train, &split.val, cfg, epoch)?;
        on_epoch(&metrics);
        history.push(metrics);
    }
    Ok(history)
}
