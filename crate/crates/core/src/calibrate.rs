//! Within-layer normalization, between-layer rate equalization and the
//! composed calibration pipeline.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{LayerKind, LayerSpec, NetworkGraph};
use crate::init::{initialize, InitConfig};
use crate::network::{forward_layers, WeightStore};
use crate::rng::derive_seed;
use crate::stats::{
    change_rates, geometric_mean, tensor_channel_stats, ChangeRateReport, ChannelStats, RateConfig, RateMode,
};
use crate::tensor::{Scalar, Tensor};

/// Channels whose standard deviation falls below this are reported as dead.
pub const DEAD_CHANNEL_STD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FoldPolicy {
    /// Undo a scale in the next affine layer when every layer in between is
    /// positively homogeneous; otherwise insert a scale layer.
    FoldIfHomogeneous,
    /// Always undo through an explicit scale layer.
    AlwaysInsertScaleLayer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationConfig {
    /// Target activation mean.
    pub beta: f64,
    /// Damping `0 < alpha < 1` of the between-layer corrections.
    pub alpha: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub fold_policy: FoldPolicy,
    pub rate_mode: RateMode,
    pub draws_per_image: usize,
    pub skip_within: bool,
    pub skip_between: bool,
    /// Divide the top layer by the cumulative output scale at the end.
    pub restore_output_scale: bool,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            beta: 0.0,
            alpha: 0.25,
            iterations: 10,
            batch_size: 64,
            seed: 0,
            fold_policy: FoldPolicy::AlwaysInsertScaleLayer,
            rate_mode: RateMode::ExactEmpirical,
            draws_per_image: 1,
            skip_within: false,
            skip_between: false,
            restore_output_scale: false,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("damping must lie in (0, 1), got {}", self.alpha)));
        }
        if self.iterations == 0 {
            return Err(Error::Config("at least one between-layer iteration is required".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("calibration batch size must be at least 1".into()));
        }
        if !self.beta.is_finite() {
            return Err(Error::Config("target mean must be finite".into()));
        }
        Ok(())
    }

    fn rate_config(&self, label: &str) -> RateConfig {
        RateConfig {
            mode: self.rate_mode,
            seed: derive_seed(self.seed, label),
            draws_per_image: self.draws_per_image,
        }
    }
}

/// Normalize every affine layer, in topological order, so that each output
/// channel has mean `beta` and unit variance over `batch`. Only the layer's
/// own weight rows and biases change.
pub fn within_layer<T: Scalar>(
    graph: &NetworkGraph,
    weights: &mut WeightStore<T>,
    batch: &Tensor<T>,
    beta: f64,
) -> Result<Vec<ChannelStats>> {
    if batch.dim0() == 0 {
        return Err(Error::EmptyBatch);
    }
    weights.validate(graph)?;
    let mut measured = Vec::new();
    for name in graph.affine_layers() {
        let out = forward_layers(graph, weights, batch, &[name])?
            .remove(name)
            .expect("requested");
        let stats = tensor_channel_stats(&out, name)?;
        let p = weights.get_mut(name)?;
        for ch in 0..p.rows() {
            let std = stats.std(ch);
            if std.is_nan() || std < DEAD_CHANNEL_STD {
                return Err(Error::DeadChannel {
                    layer: name.to_string(),
                    channel: ch,
                    std,
                });
            }
            let inv = T::from_f64(1.0 / std);
            p.weight.row_mut(ch).iter_mut().for_each(|w| *w *= inv);
            // Reduces to `beta - mean / std` for a zero initial bias.
            let b = &mut p.bias.data_mut()[ch];
            *b = T::from_f64((b.as_f64() - stats.mean[ch]) / std + beta);
        }
        measured.push(stats);
    }
    Ok(measured)
}

/// Per-channel statistics of every affine layer's output.
pub fn affine_stats<T: Scalar>(
    graph: &NetworkGraph,
    weights: &WeightStore<T>,
    batch: &Tensor<T>,
) -> Result<Vec<ChannelStats>> {
    let names = graph.affine_layers();
    let outs = forward_layers(graph, weights, batch, &names)?;
    names.iter().map(|n| tensor_channel_stats(&outs[*n], n)).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "layers")]
pub enum RescaleOutcome {
    /// Undone in the weights of these affine consumers.
    Folded(Vec<String>),
    /// Undone by this scale layer.
    Inserted(String),
    /// Topmost affine layer: the scale reaches the network output.
    Output,
}

struct Downstream {
    affine: BTreeSet<String>,
    reaches_output: bool,
    blocked: bool,
}

/// What lies between `start` and the next affine layers on every path.
fn downstream(graph: &NetworkGraph, start: &str) -> Result<Downstream> {
    let mut d = Downstream {
        affine: BTreeSet::new(),
        reaches_output: start == graph.output_name(),
        blocked: false,
    };
    let mut stack = vec![start.to_string()];
    let mut visited = BTreeSet::new();
    while let Some(node) = stack.pop() {
        for c in graph.consumers(&node)? {
            let kind = &graph.layer(c)?.kind;
            if kind.is_affine() {
                d.affine.insert(c.to_string());
            } else if kind.is_positively_homogeneous() {
                if c == graph.output_name() {
                    d.reaches_output = true;
                }
                if visited.insert(c.to_string()) {
                    stack.push(c.to_string());
                }
            } else {
                d.blocked = true;
            }
        }
    }
    Ok(d)
}

fn rescale_layer_name(layer: &str) -> String {
    format!("{layer}/rescale")
}

/// Multiply `(W_k, b_k)` of `layer` by `r` and undo the change downstream so
/// that the network function is preserved, except for the topmost affine
/// layer whose scale is reported as [`RescaleOutcome::Output`].
pub fn rescale_layer<T: Scalar>(
    graph: &mut NetworkGraph,
    weights: &mut WeightStore<T>,
    layer: &str,
    r: f64,
    policy: FoldPolicy,
) -> Result<RescaleOutcome> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::Config(format!("scale correction must be positive, got {r}")));
    }
    if !graph.layer(layer)?.kind.is_affine() {
        return Err(Error::NotAffine(layer.to_string()));
    }
    let d = downstream(graph, layer)?;
    {
        let p = weights.get_mut(layer)?;
        let f = T::from_f64(r);
        p.weight.scale_in_place(f);
        p.bias.scale_in_place(f);
    }
    if !d.blocked && d.affine.is_empty() && d.reaches_output {
        return Ok(RescaleOutcome::Output);
    }
    if policy == FoldPolicy::FoldIfHomogeneous && !d.blocked && !d.reaches_output {
        let inv = T::from_f64(1.0 / r);
        for c in &d.affine {
            weights.get_mut(c)?.weight.scale_in_place(inv);
        }
        return Ok(RescaleOutcome::Folded(d.affine.into_iter().collect()));
    }

    // Reuse a scale layer inserted by an earlier call.
    let existing = rescale_layer_name(layer);
    let consumers = graph.consumers(layer)?;
    if consumers == [existing.as_str()] {
        if let LayerKind::Scale { factor } = graph.layer(&existing)?.kind {
            graph.set_scale(&existing, factor / r)?;
            return Ok(RescaleOutcome::Inserted(existing));
        }
    }
    let mut name = existing.clone();
    let mut n = 1;
    while graph.contains(&name) {
        name = format!("{existing}{n}");
        n += 1;
    }
    let spec = LayerSpec::new(name.clone(), LayerKind::Scale { factor: 1.0 / r }, &[layer]);
    *graph = graph.insert_after(layer, spec)?;
    Ok(RescaleOutcome::Inserted(name))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub iteration: usize,
    /// Affine layers in topological order.
    pub layers: Vec<String>,
    /// `C~_k` measured at the start of the iteration.
    pub rates: Vec<f64>,
    /// Within-layer coefficient of variation at the start of the iteration.
    pub cvs: Vec<f64>,
    /// Geometric mean `C~` of `rates`.
    pub geo_mean: f64,
    /// `r_k = (C~_k / C~)^(alpha / 2)`.
    pub corrections: Vec<f64>,
    /// Product of all corrections.
    pub correction_product: f64,
    /// Cumulative output scale after applying the corrections.
    pub output_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTrace {
    pub iterations: Vec<IterationTrace>,
    pub output_scale: f64,
    pub output_scale_restored: bool,
    pub final_stats: Vec<ChannelStats>,
}

/// Corrections `r_k = (C~_k / C~)^(alpha/2)` towards the geometric mean.
pub fn corrections(rates: &[f64], alpha: f64) -> (f64, Vec<f64>) {
    let geo = geometric_mean(rates);
    (geo, rates.iter().map(|c| (c / geo).powf(alpha / 2.0)).collect())
}

/// Iteratively scale whole affine layers so their change rates approach the
/// geometric mean over layers.
pub fn between_layer<T: Scalar>(
    graph: &mut NetworkGraph,
    weights: &mut WeightStore<T>,
    batch: &Tensor<T>,
    config: &CalibrationConfig,
) -> Result<CalibrationTrace> {
    config.validate()?;
    if batch.dim0() == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut output_scale = 1.0;
    let mut top_layers: BTreeSet<String> = BTreeSet::new();
    let mut iterations = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let report = change_rates(graph, weights, batch, &config.rate_config(&format!("between/{it}")))?;
        let layers: Vec<String> = report.layers.iter().map(|l| l.layer.clone()).collect();
        let rates = report.mean_rates();
        let cvs = report.layers.iter().map(|l| l.cv).collect();
        let (geo_mean, rs) = corrections(&rates, config.alpha);
        for (name, &r) in layers.iter().zip(&rs) {
            if rescale_layer(graph, weights, name, r, config.fold_policy)? == RescaleOutcome::Output {
                output_scale *= r;
                top_layers.insert(name.clone());
            }
        }
        iterations.push(IterationTrace {
            iteration: it,
            layers,
            correction_product: rs.iter().product(),
            rates,
            cvs,
            geo_mean,
            corrections: rs,
            output_scale,
        });
    }
    let mut restored = false;
    if config.restore_output_scale && output_scale != 1.0 {
        let inv = T::from_f64(1.0 / output_scale);
        for name in &top_layers {
            let p = weights.get_mut(name)?;
            p.weight.scale_in_place(inv);
            p.bias.scale_in_place(inv);
        }
        restored = true;
    }
    Ok(CalibrationTrace {
        iterations,
        output_scale,
        output_scale_restored: restored,
        final_stats: affine_stats(graph, weights, batch)?,
    })
}

#[derive(Clone, Debug)]
pub struct Calibration<T = f32> {
    /// The graph may gain scale layers during between-layer adjustment.
    pub graph: NetworkGraph,
    pub weights: WeightStore<T>,
    pub within_stats: Option<Vec<ChannelStats>>,
    pub trace: Option<CalibrationTrace>,
    pub before: ChangeRateReport,
    pub after: ChangeRateReport,
}

/// Initialize (unless `weights` are given), normalize within layers, then
/// equalize between layers, honoring the stage toggles.
pub fn calibrate<T: Scalar>(
    graph: &NetworkGraph,
    weights: Option<WeightStore<T>>,
    batch: &Tensor<T>,
    init: &InitConfig,
    config: &CalibrationConfig,
) -> Result<Calibration<T>> {
    config.validate()?;
    if batch.dim0() == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut graph = graph.clone();
    let mut weights = match weights {
        Some(w) => {
            w.validate(&graph)?;
            w
        }
        None => initialize(&graph, Some(batch), init)?,
    };
    let before = change_rates(&graph, &weights, batch, &config.rate_config("report/before"))?;
    let within_stats = if config.skip_within {
        None
    } else {
        Some(within_layer(&graph, &mut weights, batch, config.beta)?)
    };
    let trace = if config.skip_between {
        None
    } else {
        Some(between_layer(&mut graph, &mut weights, batch, config)?)
    };
    let after = change_rates(&graph, &weights, batch, &config.rate_config("report/after"))?;
    Ok(Calibration {
        graph,
        weights,
        within_stats,
        trace,
        before,
        after,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corrections_center_on_geometric_mean() {
        let (geo, rs) = corrections(&[4.0, 1.0], 0.25);
        assert!((geo - 2.0).abs() < 1e-15);
        assert!((rs[0] - 2f64.powf(0.125)).abs() < 1e-15);
        assert!((rs[1] - 2f64.powf(-0.125)).abs() < 1e-15);
        assert!((rs.iter().product::<f64>() - 1.0).abs() < 1e-15);
        let (_, flat) = corrections(&[3.0, 3.0, 3.0], 0.25);
        assert!(flat.iter().all(|&r| (r - 1.0).abs() < 1e-15));
    }

    #[test]
    fn config_validation() {
        assert!(CalibrationConfig::default().validate().is_ok());
        for alpha in [0.0, 1.0, -0.1] {
            let c = CalibrationConfig {
                alpha,
                ..Default::default()
            };
            assert!(c.validate().is_err());
        }
        let c = CalibrationConfig {
            iterations: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
