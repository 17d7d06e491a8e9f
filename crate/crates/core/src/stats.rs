//! Activation statistics and gradient change rates.
//!
//! For an affine layer `k` with weight matrix `W_k` (`N` rows) the relative
//! change rate of fan-in column `j` is
//!
//! ```text
//! C~²_{k,j} = E[ z_{k-1}(j)² ‖y_k‖² ] / (N ‖W_k‖²)
//! ```
//!
//! under a random linear loss `ηᵀ z_out` with `η ~ N(0, I)` drawn per image.
//! The exact mode accumulates squared per-image weight gradients; the
//! decoupled mode factorises the expectation into `E[z(j)²] · E[‖y‖²]`.
//! Convolution gradients are pooled over output positions, so a column is one
//! `(input channel, kernel offset)` coordinate.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::NetworkGraph;
use crate::network::{self, backward, conv_geometry_of, forward, ActivationCache, Mode, WeightStore};
use crate::ops;
use crate::rng::combine;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub layer: String,
    pub mean: Vec<f64>,
    /// Population variance.
    pub variance: Vec<f64>,
    /// Images times spatial positions.
    pub count: usize,
}

impl ChannelStats {
    pub fn std(&self, channel: usize) -> f64 {
        self.variance[channel].sqrt()
    }
}

/// Per-channel mean and variance of a layer's output, pooled over the batch
/// and all spatial positions.
pub fn channel_stats<T: Scalar>(cache: &ActivationCache<T>, layer: &str) -> Result<ChannelStats> {
    let z = cache.get(layer)?;
    tensor_channel_stats(z, layer)
}

pub fn tensor_channel_stats<T: Scalar>(z: &Tensor<T>, layer: &str) -> Result<ChannelStats> {
    let shape = z.shape();
    let n = z.dim0();
    if n == 0 || z.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let c = shape[1];
    let hw = z.stride0() / c;
    // Welford per channel.
    let mut mean = vec![0.0f64; c];
    let mut m2 = vec![0.0f64; c];
    let mut seen = 0usize;
    for s in 0..n {
        let row = z.row(s);
        seen += hw;
        for ch in 0..c {
            let base = (seen - hw) as f64;
            let (mut mu, mut acc) = (mean[ch], m2[ch]);
            for (q, v) in row[ch * hw..(ch + 1) * hw].iter().enumerate() {
                let v = v.as_f64();
                let cnt = base + q as f64 + 1.0;
                let d = v - mu;
                mu += d / cnt;
                acc += d * (v - mu);
            }
            mean[ch] = mu;
            m2[ch] = acc;
        }
    }
    let variance = m2.iter().map(|&a| (a / seen as f64).max(0.0)).collect();
    Ok(ChannelStats {
        layer: layer.to_string(),
        mean,
        variance,
        count: seen,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RateMode {
    /// Squared per-image gradients.
    ExactEmpirical,
    /// Independence factorisation `E[z(j)²] E[‖y‖²]`.
    DecoupledApproximation,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateConfig {
    pub mode: RateMode,
    pub seed: u64,
    /// Independent random losses per image.
    pub draws_per_image: usize,
}

impl RateConfig {
    pub fn exact(seed: u64) -> Self {
        RateConfig {
            mode: RateMode::ExactEmpirical,
            seed,
            draws_per_image: 1,
        }
    }

    pub fn decoupled(seed: u64) -> Self {
        RateConfig {
            mode: RateMode::DecoupledApproximation,
            ..Self::exact(seed)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRates {
    pub layer: String,
    /// `C~²_{k,j}` per fan-in column.
    pub column_rates: Vec<f64>,
    /// Same quantity with the activation replaced by the constant 1.
    pub bias_rate: f64,
    /// `C~_k`: mean over columns of `C~_{k,j} = sqrt(C~²_{k,j})`.
    pub mean_rate: f64,
    /// Population std of `C~_{k,j}` over columns divided by `mean_rate`.
    pub cv: f64,
    /// Coefficient of variation over individual weights `C~_{k,i,j}`; only
    /// available in the exact mode.
    pub weight_cv: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChangeRateReport {
    pub mode: RateMode,
    pub images: usize,
    pub draws_per_image: usize,
    /// Affine layers in topological order.
    pub layers: Vec<LayerRates>,
    /// Geometric mean of the layer means.
    pub geo_mean: f64,
}

impl ChangeRateReport {
    pub fn layer(&self, name: &str) -> Option<&LayerRates> {
        self.layers.iter().find(|l| l.layer == name)
    }

    pub fn mean_rates(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.mean_rate).collect()
    }

    /// `max_k C~_k / min_k C~_k`.
    pub fn flatness(&self) -> f64 {
        flatness(&self.mean_rates())
    }
}

pub fn flatness(rates: &[f64]) -> f64 {
    let max = rates.iter().copied().fold(f64::MIN, f64::max);
    let min = rates.iter().copied().fold(f64::MAX, f64::min);
    max / min
}

pub fn geometric_mean(values: &[f64]) -> f64 {
    (values.iter().map(|v| v.ln()).sum::<f64>() / values.len() as f64).exp()
}

/// Mean and population coefficient of variation.
fn mean_cv(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let cv = if mean > 0.0 { var.sqrt() / mean } else { 0.0 };
    (mean, cv)
}

/// Per-layer raw sums accumulated over images.
#[derive(Clone)]
struct Accum {
    /// Exact: `sum (dl/dW(i,j))²` (rows x fan_in). Decoupled: `sum E_p[z(j)²]` (fan_in).
    weight: Vec<f64>,
    /// Exact: `sum (dl/db(i))²` (rows). Decoupled: `sum ‖y‖²` (one entry).
    bias: Vec<f64>,
}

impl Accum {
    fn add(&mut self, other: &Accum) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }
}

/// Stable per-image key so that the random loss follows the image, not its
/// position in the batch.
fn image_keys<T: Scalar>(batch: &Tensor<T>) -> Vec<u64> {
    let mut seen = std::collections::HashMap::new();
    (0..batch.dim0())
        .map(|s| {
            let h = batch
                .row(s)
                .iter()
                .fold(0xcbf2_9ce4_8422_2325u64, |acc, v| combine(acc, v.as_f64().to_bits()));
            let dup = seen.entry(h).or_insert(0u64);
            *dup += 1;
            combine(h, *dup)
        })
        .collect()
}

const CHUNK: usize = 4;

/// Estimate change rates of every affine layer over `batch`.
pub fn change_rates<T: Scalar>(
    graph: &NetworkGraph,
    weights: &WeightStore<T>,
    batch: &Tensor<T>,
    config: &RateConfig,
) -> Result<ChangeRateReport> {
    let images = batch.dim0();
    if images == 0 || batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if config.draws_per_image == 0 {
        return Err(Error::Config("draws_per_image must be at least 1".into()));
    }
    weights.validate(graph)?;
    let affine: Vec<&str> = graph.affine_layers();
    let mut norms = Vec::with_capacity(affine.len());
    for &name in &affine {
        let norm = weights.get(name)?.weight.sum_sq();
        if norm <= 0.0 || !norm.is_finite() {
            return Err(Error::ZeroNorm(name.to_string()));
        }
        norms.push(norm);
    }
    let keys = image_keys(batch);
    let zero: Vec<Accum> = affine
        .iter()
        .map(|&name| {
            let p = weights.get(name).expect("validated");
            let (rows, fan_in) = (p.rows(), p.fan_in());
            Accum {
                weight: vec![
                    0.0;
                    match config.mode {
                        RateMode::ExactEmpirical => rows * fan_in,
                        RateMode::DecoupledApproximation => fan_in,
                    }
                ],
                bias: vec![
                    0.0;
                    match config.mode {
                        RateMode::ExactEmpirical => rows,
                        RateMode::DecoupledApproximation => 1,
                    }
                ],
            }
        })
        .collect();

    let chunks: Vec<Result<Vec<Accum>>> = (0..images)
        .collect::<Vec<_>>()
        .par_chunks(CHUNK)
        .map(|idx| {
            let mut acc = zero.clone();
            for &s in idx {
                let part = image_contribution(graph, weights, &batch.slice0(s, s + 1), keys[s], &affine, config)?;
                for (a, p) in acc.iter_mut().zip(&part) {
                    a.add(p);
                }
            }
            Ok(acc)
        })
        .collect();
    let mut total = zero;
    for chunk in chunks {
        for (a, p) in total.iter_mut().zip(&chunk?) {
            a.add(p);
        }
    }

    let samples = (images * config.draws_per_image) as f64;
    let mut layers = Vec::with_capacity(affine.len());
    for ((&name, acc), &norm) in affine.iter().zip(&total).zip(&norms) {
        let p = weights.get(name)?;
        let (rows, fan_in) = (p.rows(), p.fan_in());
        let denom = rows as f64 * norm;
        let (column_rates, bias_rate, weight_cv) = match config.mode {
            RateMode::ExactEmpirical => {
                let mut cols = vec![0.0; fan_in];
                for i in 0..rows {
                    for (j, c) in cols.iter_mut().enumerate() {
                        *c += acc.weight[i * fan_in + j];
                    }
                }
                let cols: Vec<f64> = cols.iter().map(|c| c / samples / denom).collect();
                let bias = acc.bias.iter().sum::<f64>() / samples / denom;
                let (_, wcv) = mean_cv(acc.weight.iter().map(|v| (v / samples / norm).sqrt()));
                (cols, bias, Some(wcv))
            }
            RateMode::DecoupledApproximation => {
                let y2 = acc.bias[0] / samples;
                let cols: Vec<f64> = acc.weight.iter().map(|z2| z2 / samples * y2 / denom).collect();
                (cols, y2 / denom, None)
            }
        };
        let (mean_rate, cv) = mean_cv(column_rates.iter().map(|c| c.sqrt()));
        layers.push(LayerRates {
            layer: name.to_string(),
            column_rates,
            bias_rate,
            mean_rate,
            cv,
            weight_cv,
        });
    }
    let geo_mean = geometric_mean(&layers.iter().map(|l| l.mean_rate).collect::<Vec<_>>());
    Ok(ChangeRateReport {
        mode: config.mode,
        images,
        draws_per_image: config.draws_per_image,
        layers,
        geo_mean,
    })
}

fn image_contribution<T: Scalar>(
    graph: &NetworkGraph,
    weights: &WeightStore<T>,
    image: &Tensor<T>,
    key: u64,
    affine: &[&str],
    config: &RateConfig,
) -> Result<Vec<Accum>> {
    let cache = forward(graph, weights, image, Mode::Eval)?;
    let out_dims = graph.output_dims();
    let mut acc: Vec<Accum> = Vec::with_capacity(affine.len());
    for r in 0..config.draws_per_image {
        let eta = network::draw_random_loss::<T>(out_dims, config.seed, combine(key, r as u64));
        let grads = backward(graph, weights, &cache, &eta)?;
        for (li, &name) in affine.iter().enumerate() {
            let part = match config.mode {
                RateMode::ExactEmpirical => {
                    let g = grads.weights.get(name)?;
                    Accum {
                        weight: g.weight.data().iter().map(|v| v.as_f64().powi(2)).collect(),
                        bias: g.bias.data().iter().map(|v| v.as_f64().powi(2)).collect(),
                    }
                }
                RateMode::DecoupledApproximation => {
                    // E[z(j)²] does not depend on the draw; it is counted once per
                    // draw so both sums share the same denominator.
                    Accum {
                        weight: input_sq_means(graph, &cache, name)?,
                        bias: vec![grads.activations[name].sum_sq()],
                    }
                }
            };
            match acc.get_mut(li) {
                Some(a) => a.add(&part),
                None => acc.push(part),
            }
        }
    }
    Ok(acc)
}

/// `E_p[z_{k-1}(j)²]` of one image for every fan-in column of layer `name`.
fn input_sq_means<T: Scalar>(graph: &NetworkGraph, cache: &ActivationCache<T>, name: &str) -> Result<Vec<f64>> {
    let layer = graph.layer(name)?;
    let x = cache.get(&layer.inputs[0])?;
    match conv_geometry_of(graph, name)? {
        Some(g) => {
            let p = g.positions();
            let mut col = vec![T::zero(); g.fan_in() * p];
            ops::im2col(&g, x.row(0), &mut col);
            Ok(col
                .chunks(p)
                .map(|c| c.iter().map(|v| v.as_f64().powi(2)).sum::<f64>() / p as f64)
                .collect())
        }
        None => Ok(x.row(0).iter().map(|v| v.as_f64().powi(2)).collect()),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub layer: String,
    pub mean_rate: f64,
    pub cv: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    pub geo_mean: f64,
    /// `max / min` of the layer mean rates.
    pub flatness: f64,
}

pub fn summarize(report: &ChangeRateReport) -> Summary {
    let rows: Vec<SummaryRow> = report
        .layers
        .iter()
        .map(|l| SummaryRow {
            layer: l.layer.clone(),
            mean_rate: l.mean_rate,
            cv: l.cv,
        })
        .collect();
    let rates: Vec<f64> = rows.iter().map(|r| r.mean_rate).collect();
    Summary {
        geo_mean: geometric_mean(&rates),
        flatness: flatness(&rates),
        rows,
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.rows.iter().map(|r| r.layer.len()).max().unwrap_or(5).max(5);
        writeln!(f, "{:<width$}  {:>12}  {:>8}", "layer", "mean_rate", "cv")?;
        for r in &self.rows {
            writeln!(f, "{:<width$}  {:>12.6e}  {:>8.4}", r.layer, r.mean_rate, r.cv)?;
        }
        writeln!(f, "geometric mean {:.6e}", self.geo_mean)?;
        write!(f, "max/min ratio  {:.4}", self.flatness)
    }
}
