mod common;

use common::*;
use ddinit::ops::{self, reference::conv2d_naive, ConvGeometry, LrnParams, PoolGeometry, PoolKind};
use ddinit::{
    backward, draw_random_loss, forward, AffineParams, Error, LayerKind, Mode, NetworkGraph, Tensor, WeightStore,
};

const H: f64 = 1e-4;
const GRAD_TOL: f64 = 1e-4;

fn check(graph: &NetworkGraph, mode: Mode, seed: u64) -> f64 {
    let w = random_weights::<f64>(graph, 0.5, seed);
    let dims = graph.input_dims();
    let x = normal_tensor::<f64>(&[2, dims[0], dims[1], dims[2]], seed + 1);
    gradient_check(graph, &w, &x, mode, H)
}

#[test]
fn fc_chain_graph_order() {
    let g = chain([3, 1, 1], vec![("fc", fc(2)), ("relu", LayerKind::Relu)]);
    assert_eq!(g.topo_names(), vec!["data", "fc", "relu"]);
}

#[test]
fn identity_fc_passes_input_through() {
    let g = chain([3, 1, 1], vec![("fc", fc(3))]);
    let mut w = WeightStore::new();
    let mut eye = Tensor::<f64>::zeros(&[3, 3]);
    for i in 0..3 {
        eye.data_mut()[i * 3 + i] = 1.0;
    }
    w.insert(
        "fc",
        AffineParams {
            weight: eye,
            bias: Tensor::zeros(&[3]),
        },
    );
    let x = Tensor::from_vec(&[1, 3, 1, 1], vec![0.5, -2.0, 7.0]);
    let y = forward(&g, &w, &x, Mode::Eval).unwrap().into_output(&g);
    assert_eq!(y.data(), x.data());
}

#[test]
fn relu_forward_values() {
    let x = Tensor::<f32>::from_vec(&[1, 3, 1, 1], vec![-1.0, 0.0, 2.0]);
    assert_eq!(ops::relu_forward(&x).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn conv_matches_nested_loop_oracle_on_5x5() {
    let g = ConvGeometry {
        in_dims: [1, 5, 5],
        out_channels: 2,
        kernel: 3,
        stride: 1,
        pad: 0,
    };
    let x = normal_tensor::<f64>(&[2, 1, 5, 5], 3);
    let w = normal_tensor::<f64>(&[2, 1, 3, 3], 4);
    let b = normal_tensor::<f64>(&[2], 5);
    let fast = ops::conv_forward(&g, &x, &w, &b);
    let slow = conv2d_naive(&g, &x, &w, &b);
    assert_eq!(fast.shape(), &[2, 2, 3, 3]);
    for (a, b) in fast.data().iter().zip(slow.data()) {
        assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
    }
}

#[test]
fn single_affine_layer_chain_rule() {
    let g = chain([3, 1, 1], vec![("fc", fc(2))]);
    let w = random_weights::<f64>(&g, 1.0, 1);
    let x = Tensor::from_vec(&[1, 3, 1, 1], vec![1.0, -2.0, 0.5]);
    let eta = Tensor::from_vec(&[1, 2, 1, 1], vec![0.3, -1.1]);
    let cache = forward(&g, &w, &x, Mode::Eval).unwrap();
    let grads = backward(&g, &w, &cache, &eta).unwrap();
    let gw = grads.weights.get("fc").unwrap();
    for i in 0..2 {
        for j in 0..3 {
            assert_eq!(gw.weight.data()[i * 3 + j], eta.data()[i] * x.data()[j]);
        }
        assert_eq!(gw.bias.data()[i], eta.data()[i]);
    }
}

#[test]
fn relu_blocks_gradient_of_negative_input() {
    let x = Tensor::<f64>::from_vec(&[1, 2, 1, 1], vec![-1.0, 3.0]);
    let dy = Tensor::from_vec(&[1, 2, 1, 1], vec![5.0, 5.0]);
    assert_eq!(ops::relu_backward(&x, &dy).data(), &[0.0, 5.0]);
}

#[test]
fn gradients_conv() {
    let g = chain([2, 5, 5], vec![("conv", conv(3, 3, 2, 1))]);
    assert!(check(&g, Mode::Eval, 1) <= GRAD_TOL);
}

#[test]
fn gradients_fc() {
    let g = chain([3, 2, 2], vec![("fc", fc(4))]);
    assert!(check(&g, Mode::Eval, 2) <= GRAD_TOL);
}

#[test]
fn gradients_relu() {
    let g = chain(
        [4, 1, 1],
        vec![("fc", fc(5)), ("relu", LayerKind::Relu), ("top", fc(2))],
    );
    assert!(check(&g, Mode::Eval, 3) <= GRAD_TOL);
}

#[test]
fn gradients_pools() {
    for pool in [maxpool(2, 2), LayerKind::AvgPool { kernel: 3, stride: 2 }] {
        let g = chain([2, 5, 5], vec![("conv", conv(2, 3, 1, 1)), ("pool", pool)]);
        assert!(check(&g, Mode::Eval, 4) <= GRAD_TOL);
    }
}

#[test]
fn gradients_lrn() {
    let g = chain([5, 3, 3], vec![("conv", conv(5, 1, 1, 0)), ("norm", lrn())]);
    assert!(check(&g, Mode::Eval, 5) <= GRAD_TOL);
}

#[test]
fn gradients_dropout_and_scale() {
    let g = chain(
        [3, 2, 2],
        vec![
            ("fc", fc(6)),
            ("drop", LayerKind::Dropout { ratio: 0.5 }),
            ("scale", LayerKind::Scale { factor: -0.7 }),
            ("top", fc(2)),
        ],
    );
    assert!(check(&g, Mode::Train { seed: 9 }, 6) <= GRAD_TOL);
}

#[test]
fn gradients_concat() {
    let g = NetworkGraph::new(
        "branches",
        vec![
            input([2, 4, 4]),
            layer("a", conv(2, 3, 1, 1), &["data"]),
            layer("b", conv(3, 1, 1, 0), &["data"]),
            layer("cat", LayerKind::Concat, &["a", "b"]),
            layer("top", fc(3), &["cat"]),
        ],
    )
    .unwrap();
    assert!(check(&g, Mode::Eval, 7) <= GRAD_TOL);
}

#[test]
fn gradients_composite_conv_relu_pool_fc() {
    let g = chain(
        [2, 6, 6],
        vec![
            ("conv", conv(3, 3, 1, 1)),
            ("relu", LayerKind::Relu),
            ("pool", maxpool(2, 2)),
            ("fc", fc(4)),
        ],
    );
    assert!(check(&g, Mode::Eval, 8) <= GRAD_TOL);
}

#[test]
fn concat_graph_sums_branch_channels() {
    let g = NetworkGraph::new(
        "branches",
        vec![
            input([3, 6, 6]),
            layer("left", conv(4, 3, 1, 1), &["data"]),
            layer("right", conv(6, 1, 1, 0), &["data"]),
            layer("cat", LayerKind::Concat, &["left", "right"]),
        ],
    )
    .unwrap();
    assert_eq!(g.dims("cat").unwrap(), [10, 6, 6]);
    assert_eq!(g.output_name(), "cat");
    assert_eq!(g.consumers("data").unwrap(), vec!["left", "right"]);
}

#[test]
fn self_reference_is_rejected() {
    let err = NetworkGraph::new("loop", vec![input([1, 1, 1]), layer("fc", fc(1), &["fc"])]).unwrap_err();
    assert!(matches!(err, Error::Cycle(ref l) if l == "fc"), "{err}");
}

#[test]
fn geometry_error_names_layer() {
    let err = NetworkGraph::new("bad", vec![input([1, 2, 2]), layer("big", conv(1, 5, 1, 0), &["data"])]).unwrap_err();
    assert!(err.to_string().contains("big"), "{err}");
}

#[test]
fn shape_mismatch_names_input_layer() {
    let g = chain([1, 4, 4], vec![("fc", fc(2))]);
    let w = random_weights::<f32>(&g, 1.0, 0);
    let err = forward(&g, &w, &Tensor::zeros(&[1, 1, 3, 3]), Mode::Eval).unwrap_err();
    assert!(matches!(err, Error::ShapeMismatch { ref layer, .. } if layer == "data"));
}

#[test]
fn missing_weights_rejected() {
    let g = chain([1, 4, 4], vec![("fc", fc(2))]);
    let err = forward(
        &g,
        &WeightStore::<f32>::new(),
        &Tensor::zeros(&[1, 1, 4, 4]),
        Mode::Eval,
    )
    .unwrap_err();
    assert!(matches!(err, Error::MissingWeights(ref l) if l == "fc"));
}

#[test]
fn top_gradient_shape_checked() {
    let g = chain([1, 4, 4], vec![("fc", fc(2))]);
    let w = random_weights::<f32>(&g, 1.0, 0);
    let cache = forward(&g, &w, &Tensor::zeros(&[1, 1, 4, 4]), Mode::Eval).unwrap();
    assert!(backward(&g, &w, &cache, &Tensor::zeros(&[1, 3, 1, 1])).is_err());
}

#[test]
fn dropout_is_identity_in_eval_and_inverted_in_train() {
    let g = chain([1, 10, 10], vec![("drop", LayerKind::Dropout { ratio: 0.25 })]);
    let x = Tensor::<f64>::full(&[2, 1, 10, 10], 1.0);
    let w = WeightStore::new();
    let eval = forward(&g, &w, &x, Mode::Eval).unwrap().into_output(&g);
    assert_eq!(eval.data(), x.data());
    let train = forward(&g, &w, &x, Mode::Train { seed: 1 }).unwrap().into_output(&g);
    for v in train.data() {
        assert!(*v == 0.0 || (*v - 1.0 / 0.75).abs() < 1e-12);
    }
    let again = forward(&g, &w, &x, Mode::Train { seed: 1 }).unwrap().into_output(&g);
    assert_eq!(train.data(), again.data());
}

#[test]
fn homogeneous_layers_commute_with_positive_scaling() {
    let dims = [3, 5, 5];
    let x = normal_tensor::<f64>(&[2, 3, 5, 5], 11);
    let pool = PoolGeometry {
        in_dims: dims,
        kernel: 2,
        stride: 2,
    };
    for c in [0.1, 2.0, 37.5] {
        let cx = x.map(|v| v * c);
        let relu_scaled = ops::relu_forward(&cx);
        let scaled_relu = ops::relu_forward(&x).map(|v| v * c);
        assert!(max_rel_diff(&to_f64(&relu_scaled), &to_f64(&scaled_relu)) <= 1e-15);
        for kind in [PoolKind::Max, PoolKind::Avg] {
            let a = ops::pool_forward(&pool, kind, &cx);
            let b = ops::pool_forward(&pool, kind, &x).map(|v| v * c);
            assert!(max_rel_diff(&to_f64(&a), &to_f64(&b)) <= 1e-15);
        }
    }
}

#[test]
fn lrn_is_not_homogeneous() {
    let p = LrnParams {
        local_size: 3,
        alpha: 1.0,
        beta: 0.75,
        k: 1.0,
    };
    let x = normal_tensor::<f64>(&[1, 4, 2, 2], 12);
    let a = ops::lrn_forward(&p, [4, 2, 2], &x.map(|v| 3.0 * v));
    let b = ops::lrn_forward(&p, [4, 2, 2], &x).map(|v| 3.0 * v);
    assert!(max_rel_diff(&to_f64(&a), &to_f64(&b)) > 1e-3);
}

#[test]
fn random_loss_is_reproducible_and_per_image() {
    let a = draw_random_loss::<f64>([3, 2, 2], 5, 0);
    let b = draw_random_loss::<f64>([3, 2, 2], 5, 0);
    let c = draw_random_loss::<f64>([3, 2, 2], 5, 1);
    assert_eq!(a.shape(), &[1, 3, 2, 2]);
    assert_eq!(a.data(), b.data());
    assert_ne!(a.data(), c.data());
}

#[test]
fn random_loss_moments() {
    // 3 sigma of the sample mean is 3/sqrt(n) ~ 0.0095 and of the sample
    // variance 3 sqrt(2/n) ~ 0.013 at n = 1e5.
    let values: Vec<f64> = (0..1000u64)
        .flat_map(|i| draw_random_loss::<f64>([100, 1, 1], 17, i).into_data())
        .collect();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    assert!(mean.abs() <= 0.02, "mean {mean}");
    assert!((var - 1.0).abs() <= 0.02, "variance {var}");
}

#[test]
fn forward_is_bit_deterministic() {
    let g = benchmark_net();
    let w = random_weights::<f32>(&g, 0.05, 3);
    let x = textures(4, [3, 32, 32], 1);
    let a = forward(&g, &w, &x, Mode::Eval).unwrap().into_output(&g);
    let b = forward(&g, &w, &x, Mode::Eval).unwrap().into_output(&g);
    assert_eq!(a.data(), b.data());
}

#[test]
fn reparameterization_scales_gradients_inversely() {
    let g = chain(
        [4, 1, 1],
        vec![("fc1", fc(5)), ("relu", LayerKind::Relu), ("fc2", fc(3))],
    );
    let w = random_weights::<f64>(&g, 1.0, 21);
    let mut scaled = w.clone();
    let alpha = 2.0;
    {
        let p = scaled.get_mut("fc1").unwrap();
        p.weight.scale_in_place(alpha);
        p.bias.scale_in_place(alpha);
    }
    scaled.get_mut("fc2").unwrap().weight.scale_in_place(1.0 / alpha);
    let x = normal_tensor::<f64>(&[3, 4, 1, 1], 22);
    let eta = normal_tensor::<f64>(&[3, 3, 1, 1], 23);
    let ca = forward(&g, &w, &x, Mode::Eval).unwrap();
    let cb = forward(&g, &scaled, &x, Mode::Eval).unwrap();
    assert!(max_rel_diff(&to_f64(ca.output(&g)), &to_f64(cb.output(&g))) <= 1e-6);
    let ga = backward(&g, &w, &ca, &eta).unwrap().weights;
    let gb = backward(&g, &scaled, &cb, &eta).unwrap().weights;
    let expect1: Vec<f64> = to_f64(&ga.get("fc1").unwrap().weight)
        .iter()
        .map(|v| v / alpha)
        .collect();
    let expect2: Vec<f64> = to_f64(&ga.get("fc2").unwrap().weight)
        .iter()
        .map(|v| v * alpha)
        .collect();
    assert!(max_rel_diff(&to_f64(&gb.get("fc1").unwrap().weight), &expect1) <= 1e-14);
    assert!(max_rel_diff(&to_f64(&gb.get("fc2").unwrap().weight), &expect2) <= 1e-14);
}
