//! Minibatch SGD with classic momentum and a step learning-rate schedule.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::NetworkGraph;
use crate::io::Dataset;
use crate::network::{backward, forward, predict, Mode, WeightStore};
use crate::rng::{combine, derive_seed, stream};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_LOG_EVERY: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    SoftmaxCrossEntropy,
    /// Independent per-class sigmoids against one-hot targets.
    SigmoidCrossEntropy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    /// The learning rate is multiplied by `step_gamma` every `step_size`
    /// iterations.
    pub step_gamma: f64,
    pub step_size: usize,
    pub batch_size: usize,
    pub max_iters: usize,
    pub loss: LossKind,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            momentum: 0.9,
            step_gamma: 0.1,
            step_size: 100_000,
            batch_size: 32,
            max_iters: 500,
            loss: LossKind::SoftmaxCrossEntropy,
            seed: 0,
            log_every: DEFAULT_LOG_EVERY,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be non-negative, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 || self.log_every == 0 || self.step_size == 0 {
            return Err(Error::Config(
                "batch size, log cadence and step size must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        self.lr * self.step_gamma.powi((iteration / self.step_size) as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    /// Number of completed updates.
    pub iteration: usize,
    /// Mean minibatch loss over the updates since the previous record.
    pub loss: f64,
    pub eval_loss: Option<f64>,
    pub eval_accuracy: Option<f64>,
    /// Seconds since training started; not serialized so reruns compare
    /// byte for byte.
    #[serde(skip)]
    pub wall_clock: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<TrainRecord>,
}

impl TrainHistory {
    pub fn loss_at(&self, iteration: usize) -> Option<f64> {
        self.records.iter().find(|r| r.iteration == iteration).map(|r| r.loss)
    }

    pub fn last(&self) -> Option<&TrainRecord> {
        self.records.last()
    }
}

fn labels_of(data: &Dataset, classes: usize) -> Result<&[usize]> {
    let labels = data
        .labels
        .as_deref()
        .ok_or_else(|| Error::Config("training and evaluation need a labeled dataset".into()))?;
    if labels.len() != data.len() {
        return Err(Error::Config(format!(
            "{} labels for {} images",
            labels.len(),
            data.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Config(format!("label {bad} out of range for {classes} outputs")));
    }
    Ok(labels)
}

/// Summed loss over the batch and its gradient with respect to the outputs.
pub fn loss_and_grad<T: Scalar>(output: &Tensor<T>, labels: &[usize], loss: LossKind) -> (f64, Tensor<T>) {
    let n = output.dim0();
    let k = output.stride0();
    let mut grad = Tensor::zeros(output.shape());
    let mut total = 0.0;
    for (s, &label) in labels.iter().enumerate().take(n) {
        let x: Vec<f64> = output.row(s).iter().map(|v| v.as_f64()).collect();
        let g = grad.row_mut(s);
        match loss {
            LossKind::SoftmaxCrossEntropy => {
                let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += lse - x[label];
                for j in 0..k {
                    let p = (x[j] - lse).exp();
                    g[j] = T::from_f64(p - f64::from(j == label));
                }
            }
            LossKind::SigmoidCrossEntropy => {
                for j in 0..k {
                    let t = f64::from(j == label);
                    // softplus(x) - t x, computed stably.
                    total += x[j].max(0.0) - t * x[j] + (-x[j].abs()).exp().ln_1p();
                    g[j] = T::from_f64(1.0 / (1.0 + (-x[j]).exp()) - t);
                }
            }
        }
    }
    (total, grad)
}

const GRAD_CHUNK: usize = 8;

fn minibatch_gradients<T: Scalar>(
    graph: &NetworkGraph,
    weights: &WeightStore<T>,
    images: &Tensor<T>,
    labels: &[usize],
    loss: LossKind,
    dropout_seed: u64,
) -> Result<(f64, WeightStore<T>)> {
    let n = images.dim0();
    let starts: Vec<usize> = (0..n).step_by(GRAD_CHUNK).collect();
    let parts: Vec<Result<(f64, WeightStore<T>)>> = starts
        .par_iter()
        .map(|&s| {
            let e = (s + GRAD_CHUNK).min(n);
            let chunk = images.slice0(s, e);
            let mode = Mode::Train {
                seed: combine(dropout_seed, s as u64),
            };
            let cache = forward(graph, weights, &chunk, mode)?;
            let (l, mut g) = loss_and_grad(cache.output(graph), &labels[s..e], loss);
            g.scale_in_place(T::from_f64(1.0 / n as f64));
            Ok((l, backward(graph, weights, &cache, &g)?.weights))
        })
        .collect();
    let mut total = 0.0;
    let mut acc: Option<WeightStore<T>> = None;
    for part in parts {
        let (l, g) = part?;
        total += l;
        match acc.as_mut() {
            None => acc = Some(g),
            Some(a) => {
                for (name, p) in a.iter_mut() {
                    let q = g.get(name)?;
                    p.weight.add_assign(&q.weight);
                    p.bias.add_assign(&q.bias);
                }
            }
        }
    }
    Ok((total / n as f64, acc.expect("non-empty minibatch")))
}

/// Train `weights` on `data`, logging every `config.log_every` updates.
pub fn sgd_train<T: Scalar>(
    graph: &NetworkGraph,
    weights: WeightStore<T>,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<(WeightStore<T>, TrainHistory)> {
    sgd_train_eval(graph, weights, data, None, config)
}

/// As [`sgd_train`], additionally evaluating on `eval` at every log point.
pub fn sgd_train_eval<T: Scalar>(
    graph: &NetworkGraph,
    mut weights: WeightStore<T>,
    data: &Dataset,
    eval: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<(WeightStore<T>, TrainHistory)> {
    config.validate()?;
    weights.validate(graph)?;
    let classes = graph.output_dims().iter().product();
    let labels = labels_of(data, classes)?;
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let images: Tensor<T> = data.images.cast();
    let mut velocity = WeightStore::<T>::zeros(graph)?;
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    let mut history = TrainHistory::default();
    let (mut window, mut window_len) = (0.0, 0usize);
    let dropout_root = derive_seed(config.seed, "train/dropout");
    let start = Instant::now();

    for it in 0..config.max_iters {
        let mut idx = Vec::with_capacity(config.batch_size);
        while idx.len() < config.batch_size {
            if cursor == order.len() {
                order = (0..data.len()).collect();
                order.shuffle(&mut stream(config.seed, &format!("train/shuffle/{epoch}")));
                epoch += 1;
                cursor = 0;
            }
            let take = (config.batch_size - idx.len()).min(order.len() - cursor);
            idx.extend_from_slice(&order[cursor..cursor + take]);
            cursor += take;
        }
        let batch = images.gather0(&idx);
        let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let (loss, grads) = minibatch_gradients(
            graph,
            &weights,
            &batch,
            &batch_labels,
            config.loss,
            combine(dropout_root, it as u64),
        )?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(it));
        }
        let lr = T::from_f64(config.lr_at(it));
        let m = T::from_f64(config.momentum);
        for (name, v) in velocity.iter_mut() {
            let g = grads.get(name)?;
            let p = weights.get_mut(name)?;
            for (vt, (gt, wt)) in [
                (&mut v.weight, (&g.weight, &mut p.weight)),
                (&mut v.bias, (&g.bias, &mut p.bias)),
            ] {
                for ((vi, gi), wi) in vt.data_mut().iter_mut().zip(gt.data()).zip(wt.data_mut()) {
                    *vi = m * *vi - lr * *gi;
                    *wi += *vi;
                }
            }
        }
        window += loss;
        window_len += 1;
        let done = it + 1;
        if done % config.log_every == 0 || done == config.max_iters {
            let (eval_loss, eval_accuracy) = match eval {
                Some(e) => {
                    let (l, a) = evaluate(graph, &weights, e, config.loss)?;
                    (Some(l), Some(a))
                }
                None => (None, None),
            };
            history.records.push(TrainRecord {
                iteration: done,
                loss: window / window_len as f64,
                eval_loss,
                eval_accuracy,
                wall_clock: start.elapsed().as_secs_f64(),
            });
            window = 0.0;
            window_len = 0;
        }
    }
    Ok((weights, history))
}

/// Mean loss and accuracy with dropout disabled. Ties in the arg-max go to
/// the lowest class index.
pub fn evaluate<T: Scalar>(
    graph: &NetworkGraph,
    weights: &WeightStore<T>,
    data: &Dataset,
    loss: LossKind,
) -> Result<(f64, f64)> {
    let classes = graph.output_dims().iter().product();
    let labels = labels_of(data, classes)?;
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let images: Tensor<T> = data.images.cast();
    let n = data.len();
    let starts: Vec<usize> = (0..n).step_by(64).collect();
    let parts: Vec<Result<(f64, usize)>> = starts
        .par_iter()
        .map(|&s| {
            let e = (s + 64).min(n);
            let out = predict(graph, weights, &images.slice0(s, e))?;
            let (l, _) = loss_and_grad(&out, &labels[s..e], loss);
            let correct = (0..e - s).filter(|&i| argmax(out.row(i)) == labels[s + i]).count();
            Ok((l, correct))
        })
        .collect();
    let (mut total, mut correct) = (0.0, 0);
    for p in parts {
        let (l, c) = p?;
        total += l;
        correct += c;
    }
    Ok((total / n as f64, correct as f64 / n as f64))
}

pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
