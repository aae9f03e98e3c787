use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::CnnModel;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::rng::{stream, Stage};

/// Samples per gradient chunk. Each chunk is reduced sequentially and the
/// chunk sums are added in chunk order, so the result does not depend on
/// how many threads run the chunks.
const CHUNK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Run every chunk on the calling thread.
    pub deterministic: bool,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 0,
            deterministic: false,
        }
    }
}

impl TrainParams {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::domain("epochs and batch size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::domain(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::domain(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean cross-entropy over the epoch's training steps.
    pub train_loss: f64,
    /// Accuracy of the predictions made during the epoch's forward passes.
    pub train_acc: f64,
    pub val_acc: f64,
}

impl EpochMetrics {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,train_acc,val_acc";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.epoch, self.train_loss, self.train_acc, self.val_acc
        )
    }
}

struct Batch {
    grads: Vec<Vec<f64>>,
    loss: f64,
    correct: usize,
}

fn add_into(acc: &mut [Vec<f64>], other: &[Vec<f64>]) {
    for (a, b) in acc.iter_mut().zip(other) {
        for (x, y) in a.iter_mut().zip(b) {
            *x += y;
        }
    }
}

type Fetch<'a> = dyn Fn(usize) -> Result<Vec<f64>> + Sync + 'a;

fn batch_gradients(
    model: &CnnModel,
    fetch: &Fetch,
    labels: &[usize],
    batch: &[usize],
    deterministic: bool,
) -> Result<Batch> {
    let chunk = |idx: &[usize]| -> Result<Batch> {
        let mut grads = model.zero_gradients();
        let mut loss = 0.0;
        let mut correct = 0;
        for &i in idx {
            let (l, p) = model.accumulate_gradients(&fetch(i)?, labels[i], &mut grads)?;
            loss += l;
            correct += usize::from(p == labels[i]);
        }
        Ok(Batch { grads, loss, correct })
    };
    let parts: Vec<Batch> = if deterministic {
        batch.chunks(CHUNK).map(chunk).collect::<Result<_>>()?
    } else {
        batch.par_chunks(CHUNK).map(chunk).collect::<Result<_>>()?
    };
    let mut iter = parts.into_iter();
    let mut total = iter.next().expect("non-empty batch");
    for p in iter {
        add_into(&mut total.grads, &p.grads);
        total.loss += p.loss;
        total.correct += p.correct;
    }
    Ok(total)
}

fn check_labels(model: &CnnModel, data: &Dataset, what: &str) -> Result<()> {
    if data.is_empty() {
        return Err(Error::domain(format!("{what} dataset is empty")));
    }
    if data.labels().iter().any(|&l| l >= model.class_count()) {
        return Err(Error::domain(format!(
            "{what} labels exceed the model's {} classes",
            model.class_count()
        )));
    }
    Ok(())
}

fn accuracy(model: &CnnModel, data: &Dataset, deterministic: bool) -> Result<f64> {
    let hit = |s: &crate::dataset::Sample| -> Result<usize> {
        Ok(usize::from(model.predict(&s.image)? == s.label as usize))
    };
    let correct: usize = if deterministic {
        data.samples().iter().map(hit).sum::<Result<usize>>()?
    } else {
        data.samples().par_iter().map(hit).sum::<Result<usize>>()?
    };
    Ok(correct as f64 / data.len() as f64)
}

/// Mini-batch SGD with momentum on the cross-entropy loss.
///
/// The update is `v ← μ·v + g`, `p ← p − η·v` with `g` the batch-mean
/// gradient. Batches follow a seeded permutation per epoch. `on_epoch` sees
/// each epoch's metrics as soon as they are known. A non-finite loss aborts
/// with a numerical error naming the epoch and step.
pub fn cnn_train(
    model: &CnnModel,
    train: &Dataset,
    val: &Dataset,
    params: &TrainParams,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<(CnnModel, Vec<EpochMetrics>)> {
    params.validate()?;
    check_labels(model, train, "training")?;
    check_labels(model, val, "validation")?;
    let train_y = train.labels();
    let mut model = model.clone();
    let mut velocity = model.zero_gradients();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(params.epochs);
    for epoch in 0..params.epochs {
        order.shuffle(&mut stream(params.seed, epoch as u64, Stage::Shuffle));
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for (step, batch) in order.chunks(params.batch_size).enumerate() {
            let fetch = |i: usize| model.input_from(&train.samples()[i].image);
            let b = batch_gradients(&model, &fetch, &train_y, batch, params.deterministic)?;
            if !b.loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss at epoch {} step {}; try a smaller learning rate",
                    epoch + 1,
                    step + 1
                )));
            }
            loss_sum += b.loss;
            correct += b.correct;
            let scale = 1.0 / batch.len() as f64;
            for ((p, v), g) in model.parameters_mut().into_iter().zip(&mut velocity).zip(&b.grads) {
                for ((pi, vi), gi) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                    *vi = params.momentum * *vi + gi * scale;
                    *pi -= params.learning_rate * *vi;
                }
            }
        }
        let n = train.len() as f64;
        let metrics = EpochMetrics {
            epoch: epoch + 1,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            val_acc: accuracy(&model, val, params.deterministic)?,
        };
        on_epoch(&metrics)?;
        history.push(metrics);
    }
    model.set_trained_with(Some(*params));
    Ok((model, history))
}

/// Mean cross-entropy of a set of samples.
pub fn batch_loss(model: &CnnModel, inputs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for (x, &l) in inputs.iter().zip(labels) {
        total += super::cross_entropy(&model.logits(x)?, l);
    }
    Ok(total / inputs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(tensor, element)` of the worst parameter.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Central-difference step used by [`gradient_check`].
pub const FD_STEP: f64 = 1e-5;

/// Compares backpropagated gradients with central finite differences for
/// every parameter. The relative error of one parameter is
/// `|a − n| / max(|a|, |n|, floor)`; the floor keeps parameters whose true
/// gradient vanishes (for example behind an inactive ReLU) from dividing
/// round-off by zero.
pub fn gradient_check_with(
    model: &CnnModel,
    x: &[f64],
    label: usize,
    step: f64,
    floor: f64,
) -> Result<GradCheck> {
    let mut analytic = model.zero_gradients();
    model.accumulate_gradients(x, label, &mut analytic)?;
    let mut probe = model.clone();
    let mut worst = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for (t, grad) in analytic.iter().enumerate() {
        for (k, &a) in grad.iter().enumerate() {
            let orig = probe.parameters()[t][k];
            probe.parameters_mut()[t][k] = orig + step;
            let up = super::cross_entropy(&probe.logits(x)?, label);
            probe.parameters_mut()[t][k] = orig - step;
            let down = super::cross_entropy(&probe.logits(x)?, label);
            probe.parameters_mut()[t][k] = orig;
            let n = (up - down) / (2.0 * step);
            let err = (a - n).abs() / a.abs().max(n.abs()).max(floor);
            if err > worst.max_rel_error {
                worst.max_rel_error = err;
                worst.worst = (t, k);
            }
            worst.checked += 1;
        }
    }
    Ok(worst)
}

/// [`gradient_check_with`] at step `1e-5` and floor `1e-6`.
pub fn gradient_check(model: &CnnModel, x: &[f64], label: usize) -> Result<GradCheck> {
    gradient_check_with(model, x, label, FD_STEP, 1e-6)
}
