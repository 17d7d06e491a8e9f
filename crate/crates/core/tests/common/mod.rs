#![allow(dead_code)]

use ddinit::io::{gen_synthetic, SyntheticKind};
use ddinit::{LayerKind, LayerSpec, NetworkGraph, Scalar, Tensor, WeightStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn layer(name: &str, kind: LayerKind, inputs: &[&str]) -> LayerSpec {
    LayerSpec::new(name, kind, inputs)
}

pub fn input(shape: [usize; 3]) -> LayerSpec {
    layer("data", LayerKind::Input { shape }, &[])
}

pub fn conv(out_channels: usize, kernel: usize, stride: usize, pad: usize) -> LayerKind {
    LayerKind::Conv {
        out_channels,
        kernel,
        stride,
        pad,
    }
}

pub fn fc(out_units: usize) -> LayerKind {
    LayerKind::Fc { out_units }
}

pub fn maxpool(kernel: usize, stride: usize) -> LayerKind {
    LayerKind::MaxPool { kernel, stride }
}

pub fn lrn() -> LayerKind {
    LayerKind::Lrn {
        local_size: 3,
        alpha: 0.5,
        beta: 0.75,
        k: 1.0,
    }
}

/// Sequential graph where every layer consumes the previous one.
pub fn chain(shape: [usize; 3], body: Vec<(&str, LayerKind)>) -> NetworkGraph {
    let mut layers = vec![input(shape)];
    let mut prev = "data".to_string();
    for (name, kind) in body {
        layers.push(LayerSpec::new(name, kind, &[prev.as_str()]));
        prev = name.to_string();
    }
    NetworkGraph::new("chain", layers).unwrap()
}

/// Five convolutions and two fully-connected layers on 3x32x32 inputs.
pub fn benchmark_net() -> NetworkGraph {
    use LayerKind::Relu;
    chain(
        [3, 32, 32],
        vec![
            ("conv1", conv(16, 5, 1, 2)),
            ("relu1", Relu),
            ("pool1", maxpool(2, 2)),
            ("conv2", conv(32, 5, 1, 2)),
            ("relu2", Relu),
            ("pool2", maxpool(2, 2)),
            ("conv3", conv(32, 3, 1, 1)),
            ("relu3", Relu),
            ("conv4", conv(32, 3, 1, 1)),
            ("relu4", Relu),
            ("conv5", conv(32, 3, 1, 1)),
            ("relu5", Relu),
            ("pool5", maxpool(2, 2)),
            ("fc6", fc(64)),
            ("relu6", Relu),
            ("fc7", fc(10)),
        ],
    )
}

/// Two conv-relu-pool stages and two fully-connected layers on 1x28x28.
pub fn desk_net() -> NetworkGraph {
    use LayerKind::Relu;
    chain(
        [1, 28, 28],
        vec![
            ("conv1", conv(16, 5, 1, 0)),
            ("relu1", Relu),
            ("pool1", maxpool(2, 2)),
            ("conv2", conv(32, 5, 1, 0)),
            ("relu2", Relu),
            ("pool2", maxpool(2, 2)),
            ("fc3", fc(64)),
            ("relu3", Relu),
            ("fc4", fc(10)),
        ],
    )
}

/// Small conv net with an LRN between two convolutions.
pub fn lrn_net() -> NetworkGraph {
    use LayerKind::Relu;
    chain(
        [2, 8, 8],
        vec![
            ("conv1", conv(4, 3, 1, 1)),
            ("relu1", Relu),
            ("norm1", lrn()),
            ("conv2", conv(6, 3, 1, 1)),
            ("relu2", Relu),
            ("pool2", maxpool(2, 2)),
            ("fc3", fc(5)),
        ],
    )
}

/// Depth-`convs` ReLU conv net followed by one fully-connected layer.
pub fn relu_conv_net(convs: usize) -> NetworkGraph {
    let mut body = Vec::new();
    let names: Vec<(String, String)> = (1..=convs).map(|i| (format!("conv{i}"), format!("relu{i}"))).collect();
    for (i, (c, r)) in names.iter().enumerate() {
        body.push((c.as_str(), conv(6 + 2 * i, 3, 1, 1)));
        body.push((r.as_str(), LayerKind::Relu));
    }
    body.push(("fc", fc(4)));
    chain([2, 8, 8], body)
}

pub fn textures(count: usize, dims: [usize; 3], seed: u64) -> Tensor<f32> {
    gen_synthetic(count, dims, seed, SyntheticKind::GaborTextures)
        .unwrap()
        .images
}

pub fn normal_tensor<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..len).map(|_| T::from_f64(rng.sample(StandardNormal))).collect(),
    )
}

/// Every weight and bias drawn from `N(0, std^2)`, including biases.
pub fn random_weights<T: Scalar>(graph: &NetworkGraph, std: f64, seed: u64) -> WeightStore<T> {
    let mut store = WeightStore::zeros(graph).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, p) in store.iter_mut() {
        for v in p.weight.data_mut().iter_mut().chain(p.bias.data_mut()) {
            *v = T::from_f64(std * rng.sample::<f64, _>(StandardNormal));
        }
    }
    store
}

pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

pub fn to_f64<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.as_f64()).collect()
}

fn linear_loss(
    graph: &NetworkGraph,
    w: &WeightStore<f64>,
    x: &Tensor<f64>,
    eta: &Tensor<f64>,
    mode: ddinit::Mode,
) -> f64 {
    let out = ddinit::forward(graph, w, x, mode).unwrap().into_output(graph);
    out.data().iter().zip(eta.data()).map(|(a, b)| a * b).sum()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Largest relative error between backpropagated gradients of `eta^T f(x)`
/// and central finite differences with step `h`, over every weight, bias
/// and input element.
pub fn gradient_check(
    graph: &NetworkGraph,
    weights: &WeightStore<f64>,
    x: &Tensor<f64>,
    mode: ddinit::Mode,
    h: f64,
) -> f64 {
    let cache = ddinit::forward(graph, weights, x, mode).unwrap();
    let eta = normal_tensor::<f64>(cache.output(graph).shape(), 99);
    let grads = ddinit::backward(graph, weights, &cache, &eta).unwrap();
    let mut worst = 0.0f64;
    let names: Vec<String> = weights.iter().map(|(n, _)| n.to_string()).collect();
    for name in &names {
        for bias in [false, true] {
            let len = {
                let p = weights.get(name).unwrap();
                if bias {
                    p.bias.len()
                } else {
                    p.weight.len()
                }
            };
            for i in 0..len {
                let mut w = weights.clone();
                let bump = |w: &mut WeightStore<f64>, d: f64| {
                    let p = w.get_mut(name).unwrap();
                    let t = if bias { &mut p.bias } else { &mut p.weight };
                    t.data_mut()[i] += d;
                };
                bump(&mut w, h);
                let plus = linear_loss(graph, &w, x, &eta, mode);
                bump(&mut w, -2.0 * h);
                let minus = linear_loss(graph, &w, x, &eta, mode);
                let numeric = (plus - minus) / (2.0 * h);
                let g = grads.weights.get(name).unwrap();
                let analytic = if bias { g.bias.data()[i] } else { g.weight.data()[i] };
                worst = worst.max(rel_err(analytic, numeric));
            }
        }
    }
    let dx = &grads.activations[graph.input_name()];
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let plus = linear_loss(graph, weights, &xp, &eta, mode);
        xp.data_mut()[i] -= 2.0 * h;
        let minus = linear_loss(graph, weights, &xp, &eta, mode);
        worst = worst.max(rel_err(dx.data()[i], (plus - minus) / (2.0 * h)));
    }
    worst
}
