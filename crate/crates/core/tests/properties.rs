mod common;

use common::*;
use ddinit::calibrate::corrections;
use ddinit::init::{whiten, PatchMatrix};
use ddinit::io::{decode_weights, encode_weights, parse_netspec, serialize_netspec};
use ddinit::{predict, WeightStore};
use proptest::prelude::*;
use std::path::Path;

fn zero_biases(w: &mut WeightStore<f64>) {
    for (_, p) in w.iter_mut() {
        p.bias.data_mut().iter_mut().for_each(|b| *b = 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn bias_free_relu_nets_are_positively_homogeneous(seed in 0u64..1000, c in 0.01f64..100.0) {
        let g = relu_conv_net(2);
        let mut w = random_weights::<f64>(&g, 0.5, seed);
        zero_biases(&mut w);
        let x = normal_tensor::<f64>(&[2, 2, 8, 8], seed + 1);
        let base = predict(&g, &w, &x).unwrap().into_data();
        let scaled = predict(&g, &w, &x.map(|v| v * c)).unwrap().into_data();
        let want: Vec<f64> = base.iter().map(|v| v * c).collect();
        prop_assert!(max_rel_diff(&want, &scaled) <= 1e-12);
    }

    #[test]
    fn reparameterization_preserves_function(seed in 0u64..1000, alpha in 0.05f64..20.0) {
        let g = relu_conv_net(2);
        let w = random_weights::<f64>(&g, 0.5, seed);
        let mut s = w.clone();
        {
            let p = s.get_mut("conv1").unwrap();
            p.weight.scale_in_place(alpha);
            p.bias.scale_in_place(alpha);
        }
        s.get_mut("conv2").unwrap().weight.scale_in_place(1.0 / alpha);
        let x = normal_tensor::<f64>(&[2, 2, 8, 8], seed + 7);
        let a = predict(&g, &w, &x).unwrap().into_data();
        let b = predict(&g, &s, &x).unwrap().into_data();
        prop_assert!(max_rel_diff(&a, &b) <= 1e-12);
    }

    #[test]
    fn corrections_always_multiply_to_one(
        rates in prop::collection::vec(1e-8f64..1e8, 1..12),
        alpha in 0.01f64..0.99,
    ) {
        let (geo, rs) = corrections(&rates, alpha);
        prop_assert!(geo > 0.0);
        prop_assert!((rs.iter().product::<f64>() - 1.0).abs() <= 1e-9);
        for (r, c) in rs.iter().zip(&rates) {
            let consistent = if *c >= geo { *r >= 1.0 - 1e-12 } else { *r <= 1.0 + 1e-12 };
            prop_assert!(consistent);
        }
    }

    #[test]
    fn weights_round_trip(seed in 0u64..1000, std in 1e-6f64..10.0) {
        let g = lrn_net();
        let w = random_weights::<f32>(&g, std, seed);
        let back = decode_weights(&encode_weights(&w), Path::new("p")).unwrap();
        prop_assert_eq!(back, w);
    }

    #[test]
    fn netspec_round_trip(convs in 1usize..6) {
        let g = relu_conv_net(convs);
        let text = serialize_netspec(&g);
        prop_assert_eq!(parse_netspec(&text, Path::new("p")).unwrap(), g);
    }

    #[test]
    fn whitened_patches_are_centred(seed in 0u64..1000, cols in 2usize..6) {
        let t = normal_tensor::<f64>(&[500, cols], seed);
        let rows: Vec<Vec<f64>> = (0..500)
            .map(|i| t.row(i).iter().enumerate().map(|(j, v)| v * (j + 1) as f64 + j as f64).collect())
            .collect();
        let w = whiten(&PatchMatrix::from_rows(&rows), 1e-5).unwrap();
        prop_assert!(w.mean().iter().all(|m| m.abs() <= 1e-9));
        let cov = w.covariance();
        for i in 0..cols {
            prop_assert!((cov[(i, i)] - 1.0).abs() <= 1e-6);
        }
    }
}
