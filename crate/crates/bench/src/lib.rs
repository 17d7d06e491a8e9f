//! Fixtures shared by the benchmarks.

use ddinit::io::{gen_synthetic, SyntheticKind};
use ddinit::{LayerKind, LayerSpec, NetworkGraph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn layer(name: &str, kind: LayerKind, input: &str) -> LayerSpec {
    LayerSpec::new(name, kind, &[input])
}

fn conv(out_channels: usize, kernel: usize, pad: usize) -> LayerKind {
    LayerKind::Conv {
        out_channels,
        kernel,
        stride: 1,
        pad,
    }
}

fn pool() -> LayerKind {
    LayerKind::MaxPool { kernel: 2, stride: 2 }
}

/// Five convolutions and two fully-connected layers on 3x32x32 inputs.
pub fn benchmark_net() -> NetworkGraph {
    use LayerKind::{Fc, Input, Relu};
    NetworkGraph::new(
        "benchmark",
        vec![
            LayerSpec::new("data", Input { shape: [3, 32, 32] }, &[]),
            layer("conv1", conv(16, 5, 2), "data"),
            layer("relu1", Relu, "conv1"),
            layer("pool1", pool(), "relu1"),
            layer("conv2", conv(32, 5, 2), "pool1"),
            layer("relu2", Relu, "conv2"),
            layer("pool2", pool(), "relu2"),
            layer("conv3", conv(32, 3, 1), "pool2"),
            layer("relu3", Relu, "conv3"),
            layer("conv4", conv(32, 3, 1), "relu3"),
            layer("relu4", Relu, "conv4"),
            layer("conv5", conv(32, 3, 1), "relu4"),
            layer("relu5", Relu, "conv5"),
            layer("pool5", pool(), "relu5"),
            layer("fc6", Fc { out_units: 64 }, "pool5"),
            layer("relu6", Relu, "fc6"),
            layer("fc7", Fc { out_units: 10 }, "relu6"),
        ],
    )
    .expect("valid benchmark net")
}

pub fn texture_batch(count: usize, seed: u64) -> Tensor<f32> {
    gen_synthetic(count, [3, 32, 32], seed, SyntheticKind::GaborTextures)
        .expect("positive shape")
        .images
}

pub fn uniform_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect())
}
