mod common;

use std::path::Path;

use common::*;
use ddinit::io::{
    decode_weights, encode_weights, gen_synthetic, history_to_csv, load_idx, load_netspec, load_weights,
    loss_curves_to_csv, parse_netspec, report_to_csv, save_netspec, save_weights, serialize_netspec, write_atomic,
    write_idx_images, write_idx_labels, write_report, ReportFormat, SyntheticKind,
};
use ddinit::train::{TrainHistory, TrainRecord};
use ddinit::{change_rates, init::init_gaussian, ChangeRateReport, Error, LayerKind, RateConfig, Tensor};

const MINIMAL: &str = r#"{
  "name": "tiny",
  "layers": [
    { "name": "data", "type": "input", "shape": [1, 4, 4] },
    { "name": "conv", "type": "conv", "inputs": ["data"], "out_channels": 2, "kernel": 3 },
    { "name": "relu", "type": "relu", "inputs": ["conv"] },
    { "name": "fc", "type": "fc", "inputs": ["relu"], "out_units": 3 }
  ]
}"#;

fn origin() -> &'static Path {
    Path::new("test.json")
}

#[test]
fn minimal_netspec_parses() {
    let g = parse_netspec(MINIMAL, origin()).unwrap();
    assert_eq!(g.name(), "tiny");
    assert_eq!(g.topo_names(), vec!["data", "conv", "relu", "fc"]);
    assert_eq!(
        g.layer("conv").unwrap().kind,
        LayerKind::Conv {
            out_channels: 2,
            kernel: 3,
            stride: 1,
            pad: 0
        }
    );
    assert_eq!(g.dims("conv").unwrap(), [2, 2, 2]);
    assert_eq!(g.output_dims(), [3, 1, 1]);
}

#[test]
fn netspec_errors_name_the_layer() {
    let bad_type = MINIMAL.replace(r#""type": "relu""#, r#""type": "swish""#);
    let err = parse_netspec(&bad_type, origin()).unwrap_err().to_string();
    assert!(err.contains("relu"), "{err}");

    let extra = MINIMAL.replace(r#""kernel": 3 }"#, r#""kernel": 3, "dilation": 2 }"#);
    let err = parse_netspec(&extra, origin()).unwrap_err().to_string();
    assert!(err.contains("conv") && err.contains("dilation"), "{err}");

    let dangling = MINIMAL.replace(r#""inputs": ["relu"]"#, r#""inputs": ["nope"]"#);
    assert!(matches!(
        parse_netspec(&dangling, origin()),
        Err(Error::DanglingInput { .. })
    ));

    let err = parse_netspec("{ \"name\": ", origin()).unwrap_err();
    assert!(matches!(err, Error::Format { .. }));
    assert!(err.to_string().contains("line"));
}

#[test]
fn netspec_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    for g in [parse_netspec(MINIMAL, origin()).unwrap(), benchmark_net(), lrn_net()] {
        let text = serialize_netspec(&g);
        let back = parse_netspec(&text, origin()).unwrap();
        assert_eq!(back, g);
        assert_eq!(serialize_netspec(&back), text);
        let path = dir.path().join("net.json");
        save_netspec(&g, &path).unwrap();
        assert_eq!(load_netspec(&path).unwrap(), g);
    }
    let shipped = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../nets");
    for name in ["desk.json", "small-alexnet.json"] {
        let g = load_netspec(&shipped.join(name)).unwrap();
        assert_eq!(parse_netspec(&serialize_netspec(&g), origin()).unwrap(), g);
    }
}

#[test]
fn weights_round_trip_bit_exact_with_expected_size() {
    let g = benchmark_net();
    let w = init_gaussian::<f32>(&g, 0.01, 3).unwrap();
    let bytes = encode_weights(&w);
    let mut expected = 4 + 4 + 4;
    for name in g.affine_layers() {
        let p = w.get(name).unwrap();
        expected += 2 + name.len() + 1;
        expected += 1 + 4 * p.weight.shape().len() + 4 * p.weight.len();
        expected += 1 + 4 * p.bias.shape().len() + 4 * p.bias.len();
    }
    assert_eq!(bytes.len(), expected);
    let back = decode_weights(&bytes, origin()).unwrap();
    for ((na, a), (nb, b)) in w.iter().zip(back.iter()) {
        assert_eq!(na, nb);
        assert_eq!(a.weight.shape(), b.weight.shape());
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.weight), bits(&b.weight));
        assert_eq!(bits(&a.bias), bits(&b.bias));
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.bin");
    save_weights(&w, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(load_weights(&path).unwrap(), back);
}

#[test]
fn corrupted_weights_are_rejected() {
    let g = chain([2, 1, 1], vec![("fc", fc(3))]);
    let bytes = encode_weights(&init_gaussian::<f32>(&g, 0.01, 0).unwrap());

    let mut magic = bytes.clone();
    magic[0] = b'X';
    let err = decode_weights(&magic, Path::new("bad.bin")).unwrap_err();
    assert!(matches!(err, Error::Format { .. }));
    assert!(err.to_string().contains("bad.bin"));

    let mut version = bytes.clone();
    version[4] = 9;
    assert!(decode_weights(&version, origin()).is_err());

    for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
        let err = decode_weights(&bytes[..cut], origin()).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{cut}: {err}");
    }
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(decode_weights(&trailing, origin()).is_err());

    let err = load_weights(Path::new("/nonexistent/w.bin")).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
    assert!(err.to_string().contains("/nonexistent/w.bin"));
}

fn idx_bytes(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for d in dims {
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(payload);
    out
}

#[test]
fn idx_fixture_loads_scaled() {
    let dir = tempfile::tempdir().unwrap();
    let pixels: Vec<u8> = (0..16).map(|i| (i * 17) as u8).collect();
    let images = dir.path().join("images.idx");
    let labels = dir.path().join("labels.idx");
    std::fs::write(&images, idx_bytes(0x803, &[4, 2, 2], &pixels)).unwrap();
    std::fs::write(&labels, idx_bytes(0x801, &[4], &[3, 1, 4, 1])).unwrap();
    let d = load_idx(&images, Some(&labels)).unwrap();
    assert_eq!(d.images.shape(), &[4, 1, 2, 2]);
    for (v, p) in d.images.data().iter().zip(&pixels) {
        assert_eq!(*v, f32::from(*p) / 255.0);
    }
    assert_eq!(d.labels, Some(vec![3, 1, 4, 1]));

    let images2 = dir.path().join("images2.idx");
    let labels2 = dir.path().join("labels2.idx");
    write_idx_images(&d.images, &images2).unwrap();
    write_idx_labels(d.labels.as_ref().unwrap(), &labels2).unwrap();
    assert_eq!(std::fs::read(&images2).unwrap(), std::fs::read(&images).unwrap());
    assert_eq!(load_idx(&images2, Some(&labels2)).unwrap(), d);
}

#[test]
fn idx_errors() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("images.idx");
    std::fs::write(&images, idx_bytes(0x804, &[1, 1, 1], &[0])).unwrap();
    let err = load_idx(&images, None).unwrap_err();
    assert!(err.to_string().contains("magic"), "{err}");

    std::fs::write(&images, idx_bytes(0x803, &[2, 2, 2], &[0; 7])).unwrap();
    assert!(matches!(load_idx(&images, None), Err(Error::Format { .. })));

    std::fs::write(&images, idx_bytes(0x803, &[2, 1, 1], &[0, 255])).unwrap();
    let labels = dir.path().join("labels.idx");
    std::fs::write(&labels, idx_bytes(0x801, &[3], &[0, 1, 2])).unwrap();
    let err = load_idx(&images, Some(&labels)).unwrap_err();
    assert!(err.to_string().contains("3 labels for 2 images"), "{err}");
}

#[test]
fn synthetic_sets_are_deterministic_with_expected_moments() {
    let noise = gen_synthetic(200, [3, 16, 16], 5, SyntheticKind::GaussianNoise).unwrap();
    let n = noise.images.len() as f64;
    let mean = noise.images.data().iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    assert!((mean - 0.5).abs() <= 0.01, "{mean}");
    assert_eq!(
        noise,
        gen_synthetic(200, [3, 16, 16], 5, SyntheticKind::GaussianNoise).unwrap()
    );
    assert_ne!(
        noise,
        gen_synthetic(200, [3, 16, 16], 6, SyntheticKind::GaussianNoise).unwrap()
    );

    let tex = gen_synthetic(50, [1, 32, 32], 1, SyntheticKind::GaborTextures).unwrap();
    assert_eq!(
        tex,
        gen_synthetic(50, [1, 32, 32], 1, SyntheticKind::GaborTextures).unwrap()
    );
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..tex.len() {
        let img: Vec<f64> = tex.images.row(i).iter().map(|&v| f64::from(v)).collect();
        let m = img.iter().sum::<f64>() / img.len() as f64;
        for y in 0..32 {
            for x in 0..32 {
                let a = img[y * 32 + x] - m;
                den += a * a;
                if x + 1 < 32 {
                    num += a * (img[y * 32 + x + 1] - m);
                }
            }
        }
    }
    assert!(num / den > 0.0);
    assert!(gen_synthetic(0, [1, 2, 2], 0, SyntheticKind::GaussianNoise).is_err());
}

fn history(losses: &[f64]) -> TrainHistory {
    TrainHistory {
        records: losses
            .iter()
            .enumerate()
            .map(|(i, &loss)| TrainRecord {
                iteration: 20 * (i + 1),
                loss,
                eval_loss: None,
                eval_accuracy: None,
                wall_clock: 0.5,
            })
            .collect(),
    }
}

#[test]
fn reports_serialize_to_csv_and_json() {
    let g = chain(
        [3, 1, 1],
        vec![("fc1", fc(4)), ("relu", LayerKind::Relu), ("fc2", fc(2))],
    );
    let w = random_weights::<f32>(&g, 1.0, 1);
    let x = normal_tensor::<f32>(&[4, 3, 1, 1], 2);
    let report = change_rates(&g, &w, &x, &RateConfig::exact(0)).unwrap();
    let csv = String::from_utf8(report_to_csv(&report)).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], "layer,mean_rate,cv,geo_mean");
    assert!(lines[1].starts_with("fc1,") && lines[2].starts_with("fc2,"));
    let mean: f64 = lines[1].split(',').nth(1).unwrap().parse().unwrap();
    assert_eq!(mean, report.layers[0].mean_rate);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.json");
    write_report(&report, &path, ReportFormat::Json).unwrap();
    let back: ChangeRateReport = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    assert_eq!(back, report);

    let (fg, fw) = (chain([2, 1, 1], vec![("fc", fc(2))]), {
        let mut s = ddinit::WeightStore::<f64>::zeros(&chain([2, 1, 1], vec![("fc", fc(2))])).unwrap();
        s.get_mut("fc").unwrap().weight = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        s
    });
    let flat = change_rates(&fg, &fw, &Tensor::full(&[1, 2, 1, 1], 1.0), &RateConfig::decoupled(0)).unwrap();
    let csv = String::from_utf8(report_to_csv(&flat)).unwrap();
    assert_eq!(csv.lines().nth(1).unwrap().split(',').nth(2).unwrap(), "0e0");

    assert_eq!("csv".parse::<ReportFormat>().unwrap(), ReportFormat::Csv);
    assert!("xml".parse::<ReportFormat>().is_err());
}

#[test]
fn histories_and_loss_curves() {
    let h = history(&[2.0, 1.5]);
    let csv = String::from_utf8(history_to_csv(&h)).unwrap();
    assert_eq!(csv, "iteration,loss,eval_loss,eval_accuracy\n20,2e0,,\n40,1.5e0,,\n");
    let json = serde_json::to_string(&h).unwrap();
    assert!(!json.contains("wall_clock"));

    let curves = loss_curves_to_csv(&[("a".into(), h.clone()), ("b".into(), history(&[3.0, 0.25]))]).unwrap();
    assert_eq!(
        String::from_utf8(curves).unwrap(),
        "iteration,a,b\n20,2e0,3e0\n40,1.5e0,2.5e-1\n"
    );
    assert!(loss_curves_to_csv(&[("a".into(), h), ("b".into(), history(&[1.0]))]).is_err());
    assert!(loss_curves_to_csv(&[]).is_err());
}

#[test]
fn atomic_write_replaces_whole_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("out.txt");
    std::fs::write(&path, "old contents that are longer").unwrap();
    write_atomic(&path, b"new").unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), b"new");
    let leftovers: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(leftovers.len(), 1);
    assert!(write_atomic(&dir.path().join("missing/out.txt"), b"x").is_err());
}
