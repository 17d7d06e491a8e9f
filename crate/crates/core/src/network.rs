//! Weights, forward and backward passes over a [`NetworkGraph`].

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::{Dims, LayerKind, NetworkGraph};
use crate::ops::{self, ConvGeometry, LrnParams, PoolGeometry, PoolKind};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AffineParams<T = f32> {
    /// `[rows, fan_in...]`
    pub weight: Tensor<T>,
    /// `[rows]`
    pub bias: Tensor<T>,
}

impl<T: Scalar> AffineParams<T> {
    pub fn rows(&self) -> usize {
        self.weight.dim0()
    }

    pub fn fan_in(&self) -> usize {
        self.weight.stride0()
    }

    pub fn cast<U: Scalar>(&self) -> AffineParams<U> {
        AffineParams {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

/// Parameters of every affine layer, keyed by layer name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightStore<T = f32> {
    layers: BTreeMap<String, AffineParams<T>>,
}

impl<T: Scalar> WeightStore<T> {
    pub fn new() -> Self {
        WeightStore {
            layers: BTreeMap::new(),
        }
    }

    /// Zero weights and biases shaped for every affine layer of `graph`.
    pub fn zeros(graph: &NetworkGraph) -> Result<Self> {
        let mut store = WeightStore::new();
        for name in graph.affine_layers() {
            let shape = graph.weight_shape(name)?;
            store.insert(
                name,
                AffineParams {
                    bias: Tensor::zeros(&[shape[0]]),
                    weight: Tensor::zeros(&shape),
                },
            );
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: impl Into<String>, params: AffineParams<T>) {
        self.layers.insert(name.into(), params);
    }

    pub fn get(&self, name: &str) -> Result<&AffineParams<T>> {
        self.layers
            .get(name)
            .ok_or_else(|| Error::MissingWeights(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut AffineParams<T>> {
        self.layers
            .get_mut(name)
            .ok_or_else(|| Error::MissingWeights(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &AffineParams<T>)> {
        self.layers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut AffineParams<T>)> {
        self.layers.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> WeightStore<U> {
        WeightStore {
            layers: self.layers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Check that every affine layer has correctly shaped parameters.
    pub fn validate(&self, graph: &NetworkGraph) -> Result<()> {
        for name in graph.affine_layers() {
            let p = self.get(name)?;
            let expected = graph.weight_shape(name)?;
            if p.weight.shape() != expected.as_slice() {
                return Err(Error::ShapeMismatch {
                    layer: name.to_string(),
                    expected,
                    actual: p.weight.shape().to_vec(),
                });
            }
            if p.bias.shape() != [expected[0]] {
                return Err(Error::ShapeMismatch {
                    layer: name.to_string(),
                    expected: vec![expected[0]],
                    actual: p.bias.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Dropout is the identity.
    Eval,
    /// Inverted dropout with masks drawn from `seed`.
    Train { seed: u64 },
}

/// Outputs `z_k` of every layer for one batch.
#[derive(Clone, Debug)]
pub struct ActivationCache<T = f32> {
    outputs: HashMap<String, Tensor<T>>,
    masks: HashMap<String, Tensor<T>>,
    batch: usize,
}

impl<T: Scalar> ActivationCache<T> {
    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.outputs
            .get(name)
            .ok_or_else(|| Error::StaleCache(name.to_string()))
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn output<'a>(&'a self, graph: &NetworkGraph) -> &'a Tensor<T> {
        &self.outputs[graph.output_name()]
    }

    pub fn into_output(mut self, graph: &NetworkGraph) -> Tensor<T> {
        self.outputs
            .remove(graph.output_name())
            .expect("forward fills the output")
    }
}

/// Result of a backward pass.
#[derive(Clone, Debug)]
pub struct Gradients<T = f32> {
    /// `dl/dW_k`, `dl/db_k` summed over the batch.
    pub weights: WeightStore<T>,
    /// `y_k = dl/dz_k` for every layer.
    pub activations: HashMap<String, Tensor<T>>,
}

fn conv_geometry(graph: &NetworkGraph, name: &str) -> Result<ConvGeometry> {
    match graph.layer(name)?.kind {
        LayerKind::Conv {
            out_channels,
            kernel,
            stride,
            pad,
        } => Ok(ConvGeometry {
            in_dims: graph.in_dims(name)?,
            out_channels,
            kernel,
            stride,
            pad,
        }),
        _ => Err(Error::NotAffine(name.to_string())),
    }
}

/// Conv geometry of a layer, `None` for fully-connected layers.
pub fn conv_geometry_of(graph: &NetworkGraph, name: &str) -> Result<Option<ConvGeometry>> {
    match graph.layer(name)?.kind {
        LayerKind::Conv { .. } => conv_geometry(graph, name).map(Some),
        LayerKind::Fc { .. } => Ok(None),
        _ => Err(Error::NotAffine(name.to_string())),
    }
}

fn batched(dims: Dims, n: usize) -> Vec<usize> {
    vec![n, dims[0], dims[1], dims[2]]
}

pub fn forward<T: Scalar>(
    graph: &NetworkGraph,
    weights: &WeightStore<T>,
    batch: &Tensor<T>,
    mode: Mode,
) -> Result<ActivationCache<T>> {
    let n = batch.dim0();
    if n == 0 || batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let expected = batched(graph.input_dims(), n);
    if batch.shape() != expected.as_slice() {
        return Err(Error::ShapeMismatch {
            layer: graph.input_name().to_string(),
            expected,
            actual: batch.shape().to_vec(),
        });
    }
    let mut outputs: HashMap<String, Tensor<T>> = HashMap::with_capacity(graph.layers().len());
    let mut masks = HashMap::new();
    for layer in graph.topo() {
        let name = layer.name.as_str();
        let input = |i: usize| -> &Tensor<T> { &outputs[&layer.inputs[i]] };
        let out = match &layer.kind {
            LayerKind::Input { .. } => batch.clone(),
            LayerKind::Conv { .. } => {
                let p = weights.get(name)?;
                check_weight(graph, name, p)?;
                ops::conv_forward(&conv_geometry(graph, name)?, input(0), &p.weight, &p.bias)
            }
            LayerKind::Fc { .. } => {
                let p = weights.get(name)?;
                check_weight(graph, name, p)?;
                ops::fc_forward(input(0), &p.weight, &p.bias)
            }
            LayerKind::Relu => ops::relu_forward(input(0)),
            &LayerKind::MaxPool { kernel, stride } | &LayerKind::AvgPool { kernel, stride } => {
                let kind = if matches!(layer.kind, LayerKind::MaxPool { .. }) {
                    PoolKind::Max
                } else {
                    PoolKind::Avg
                };
                let g = PoolGeometry {
                    in_dims: graph.in_dims(name)?,
                    kernel,
                    stride,
                };
                ops::pool_forward(&g, kind, input(0))
            }
            &LayerKind::Lrn {
                local_size,
                alpha,
                beta,
                k,
            } => ops::lrn_forward(
                &LrnParams {
                    local_size,
                    alpha,
                    beta,
                    k,
                },
                graph.in_dims(name)?,
                input(0),
            ),
            &LayerKind::Dropout { ratio } => match mode {
                Mode::Eval => input(0).clone(),
                Mode::Train { seed } => {
                    let mask = dropout_mask::<T>(input(0).shape(), ratio, seed, name);
                    let x = input(0);
                    let data = x.data().iter().zip(mask.data()).map(|(&a, &m)| a * m).collect();
                    masks.insert(name.to_string(), mask);
                    Tensor::from_vec(x.shape(), data)
                }
            },
            LayerKind::Concat => {
                let parts: Vec<&Tensor<T>> = (0..layer.inputs.len()).map(input).collect();
                ops::concat_forward(&parts)
            }
            &LayerKind::Scale { factor } => {
                let f = T::from_f64(factor);
                input(0).map(|v| v * f)
            }
        };
        outputs.insert(name.to_string(), out);
    }
    Ok(ActivationCache {
        outputs,
        masks,
        batch: n,
    })
}

fn check_weight<T: Scalar>(graph: &NetworkGraph, name: &str, p: &AffineParams<T>) -> Result<()> {
    let expected = graph.weight_shape(name)?;
    if p.weight.shape() != expected.as_slice() {
        return Err(Error::ShapeMismatch {
            layer: name.to_string(),
            expected,
            actual: p.weight.shape().to_vec(),
        });
    }
    Ok(())
}

fn dropout_mask<T: Scalar>(shape: &[usize], ratio: f64, seed: u64, layer: &str) -> Tensor<T> {
    let mut rng = rng::stream(seed, &format!("dropout/{layer}"));
    let keep = T::from_f64(1.0 / (1.0 - ratio));
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| if rng.random::<f64>() < ratio { T::zero() } else { keep })
        .collect();
    Tensor::from_vec(shape, data)
}

pub fn backward<T: Scalar>(
    graph: &NetworkGraph,
    weights: &WeightStore<T>,
    cache: &ActivationCache<T>,
    top_grad: &Tensor<T>,
) -> Result<Gradients<T>> {
    let out_name = graph.output_name();
    let out = cache.get(out_name)?;
    if top_grad.shape() != out.shape() {
        return Err(Error::ShapeMismatch {
            layer: out_name.to_string(),
            expected: out.shape().to_vec(),
            actual: top_grad.shape().to_vec(),
        });
    }
    let mut pending: HashMap<String, Tensor<T>> = HashMap::new();
    pending.insert(out_name.to_string(), top_grad.clone());
    let mut activations = HashMap::with_capacity(graph.layers().len());
    let mut wgrads = WeightStore::new();

    let order: Vec<_> = graph.topo().collect();
    for layer in order.into_iter().rev() {
        let name = layer.name.as_str();
        let z = cache.get(name)?;
        let dz = pending.remove(name).unwrap_or_else(|| Tensor::zeros(z.shape()));
        let input = |i: usize| cache.get(&layer.inputs[i]);
        let input_grads: Vec<Tensor<T>> = match &layer.kind {
            LayerKind::Input { .. } => Vec::new(),
            LayerKind::Conv { .. } => {
                let p = weights.get(name)?;
                let g = ops::conv_backward(&conv_geometry(graph, name)?, input(0)?, &p.weight, &dz);
                wgrads.insert(
                    name,
                    AffineParams {
                        weight: g.weight,
                        bias: g.bias,
                    },
                );
                vec![g.input]
            }
            LayerKind::Fc { .. } => {
                let p = weights.get(name)?;
                let g = ops::fc_backward(input(0)?, &p.weight, &dz);
                wgrads.insert(
                    name,
                    AffineParams {
                        weight: g.weight,
                        bias: g.bias,
                    },
                );
                vec![g.input]
            }
            LayerKind::Relu => vec![ops::relu_backward(input(0)?, &dz)],
            &LayerKind::MaxPool { kernel, stride } | &LayerKind::AvgPool { kernel, stride } => {
                let kind = if matches!(layer.kind, LayerKind::MaxPool { .. }) {
                    PoolKind::Max
                } else {
                    PoolKind::Avg
                };
                let g = PoolGeometry {
                    in_dims: graph.in_dims(name)?,
                    kernel,
                    stride,
                };
                vec![ops::pool_backward(&g, kind, input(0)?, &dz)]
            }
            &LayerKind::Lrn {
                local_size,
                alpha,
                beta,
                k,
            } => vec![ops::lrn_backward(
                &LrnParams {
                    local_size,
                    alpha,
                    beta,
                    k,
                },
                graph.in_dims(name)?,
                input(0)?,
                &dz,
            )],
            LayerKind::Dropout { .. } => match cache.masks.get(name) {
                Some(mask) => {
                    let data = dz.data().iter().zip(mask.data()).map(|(&a, &m)| a * m).collect();
                    vec![Tensor::from_vec(dz.shape(), data)]
                }
                None => vec![dz.clone()],
            },
            LayerKind::Concat => {
                let shapes: Vec<Vec<usize>> = (0..layer.inputs.len())
                    .map(|i| input(i).map(|t| t.shape().to_vec()))
                    .collect::<Result<_>>()?;
                ops::concat_backward(&dz, &shapes)
            }
            &LayerKind::Scale { factor } => {
                let f = T::from_f64(factor);
                vec![dz.map(|v| v * f)]
            }
        };
        for (src, g) in layer.inputs.iter().zip(input_grads) {
            match pending.get_mut(src) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    pending.insert(src.clone(), g);
                }
            }
        }
        activations.insert(name.to_string(), dz);
    }
    Ok(Gradients {
        weights: wgrads,
        activations,
    })
}

/// Top gradient `eta ~ N(0, I)` of the random linear loss `eta^T z_N` for one
/// image, returned with a leading batch dimension of 1.
pub fn draw_random_loss<T: Scalar>(dims: Dims, seed: u64, image: u64) -> Tensor<T> {
    let mut rng = rng::indexed_stream(seed, "random-loss", image);
    let len = dims.iter().product();
    let data = (0..len)
        .map(|_| T::from_f64(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Tensor::from_vec(&batched(dims, 1), data)
}

/// Random losses for images `first..first + n`, stacked into one batch.
pub fn draw_random_loss_batch<T: Scalar>(dims: Dims, seed: u64, first: u64, n: usize) -> Tensor<T> {
    let parts: Vec<Tensor<T>> = (0..n as u64).map(|i| draw_random_loss(dims, seed, first + i)).collect();
    Tensor::stack0(&parts)
}

/// Network outputs in evaluation mode.
pub fn predict<T: Scalar>(graph: &NetworkGraph, weights: &WeightStore<T>, batch: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(forward(graph, weights, batch, Mode::Eval)?.into_output(graph))
}

const FORWARD_CHUNK: usize = 8;

/// Evaluation-mode outputs of the named layers, computing the batch in
/// parallel chunks. The result does not depend on the thread count.
pub fn forward_layers<T: Scalar>(
    graph: &NetworkGraph,
    weights: &WeightStore<T>,
    batch: &Tensor<T>,
    layers: &[&str],
) -> Result<HashMap<String, Tensor<T>>> {
    use rayon::prelude::*;

    let n = batch.dim0();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let starts: Vec<usize> = (0..n).step_by(FORWARD_CHUNK).collect();
    let parts: Vec<Result<Vec<Tensor<T>>>> = starts
        .par_iter()
        .map(|&s| {
            let chunk = batch.slice0(s, (s + FORWARD_CHUNK).min(n));
            let cache = forward(graph, weights, &chunk, Mode::Eval)?;
            layers.iter().map(|l| cache.get(l).cloned()).collect()
        })
        .collect();
    let parts: Vec<Vec<Tensor<T>>> = parts.into_iter().collect::<Result<_>>()?;
    Ok(layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let pieces: Vec<Tensor<T>> = parts.iter().map(|p| p[i].clone()).collect();
            (l.to_string(), Tensor::stack0(&pieces))
        })
        .collect())
}
