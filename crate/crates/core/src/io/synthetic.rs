//! Deterministic synthetic image sets.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::Dataset;
use crate::error::{Error, Result};
use crate::graph::Dims;
use crate::rng::{indexed_stream, stream};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticKind {
    /// Independent pixels, `N(0.5, 0.25²)`.
    GaussianNoise,
    /// Sums of randomly oriented Gabor patches per channel.
    GaborTextures,
    /// Ten labeled classes, each an oriented grating family with jitter and
    /// noise.
    GaborClasses,
}

impl SyntheticKind {
    pub fn name(self) -> &'static str {
        match self {
            SyntheticKind::GaussianNoise => "gaussian-noise",
            SyntheticKind::GaborTextures => "gabor-textures",
            SyntheticKind::GaborClasses => "gabor-classes",
        }
    }
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian-noise" => Ok(SyntheticKind::GaussianNoise),
            "gabor-textures" => Ok(SyntheticKind::GaborTextures),
            "gabor-classes" => Ok(SyntheticKind::GaborClasses),
            other => Err(Error::Config(format!(
                "unknown synthetic kind `{other}` (expected gaussian-noise, gabor-textures or gabor-classes)"
            ))),
        }
    }
}

pub const SYNTHETIC_CLASSES: usize = 10;

/// Generate `count` images of shape `dims`. Image `i` depends only on
/// `(seed, kind, i)`, so a larger set extends a smaller one.
pub fn gen_synthetic(count: usize, dims: Dims, seed: u64, kind: SyntheticKind) -> Result<Dataset> {
    if count == 0 || dims.contains(&0) {
        return Err(Error::Config(format!(
            "synthetic set needs positive count and shape, got {count} x {dims:?}"
        )));
    }
    let per = dims.iter().product::<usize>();
    let mut data = Vec::with_capacity(count * per);
    let mut labels = Vec::with_capacity(count);
    let label = format!("synthetic/{kind}");
    let prototypes = class_prototypes(seed);
    for i in 0..count {
        let mut rng = indexed_stream(seed, &label, i as u64);
        match kind {
            SyntheticKind::GaussianNoise => {
                let normal = Normal::new(0.5, 0.25).expect("valid");
                data.extend((0..per).map(|_| normal.sample(&mut rng) as f32));
            }
            SyntheticKind::GaborTextures => data.extend(texture(&mut rng, dims)),
            SyntheticKind::GaborClasses => {
                let class = i % SYNTHETIC_CLASSES;
                labels.push(class);
                data.extend(class_image(&mut rng, dims, &prototypes[class]));
            }
        }
    }
    Ok(Dataset {
        images: Tensor::from_vec(&[count, dims[0], dims[1], dims[2]], data),
        labels: (kind == SyntheticKind::GaborClasses).then_some(labels),
    })
}

/// `params` is `[cx, cy, theta, freq, phase, sigma]`.
fn gabor(x: f64, y: f64, [cx, cy, theta, freq, phase, sigma]: [f64; 6]) -> f64 {
    let (dx, dy) = (x - cx, y - cy);
    let u = dx * theta.cos() + dy * theta.sin();
    let envelope = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
    envelope * (2.0 * PI * freq * u + phase).cos()
}

fn texture(rng: &mut ChaCha8Rng, [c, h, w]: Dims) -> Vec<f32> {
    let mut out = vec![0.0; c * h * w];
    let extent = h.max(w) as f64;
    for plane in out.chunks_mut(h * w) {
        let patches = rng.random_range(2..=4);
        let params: Vec<[f64; 6]> = (0..patches)
            .map(|_| {
                [
                    rng.random::<f64>() * w as f64,
                    rng.random::<f64>() * h as f64,
                    rng.random::<f64>() * PI,
                    rng.random_range(0.05..0.25),
                    rng.random::<f64>() * 2.0 * PI,
                    extent * rng.random_range(0.15..0.4),
                ]
            })
            .collect();
        for y in 0..h {
            for x in 0..w {
                let v: f64 = params.iter().map(|&p| gabor(x as f64, y as f64, p)).sum();
                let noise: f64 = StandardNormal.sample(rng);
                plane[y * w + x] = (0.5 + 0.25 * v + 0.02 * noise) as f32;
            }
        }
    }
    out
}

struct Prototype {
    theta: f64,
    freq: f64,
}

fn class_prototypes(seed: u64) -> Vec<Prototype> {
    let mut rng = stream(seed, "synthetic/gabor-classes/prototypes");
    (0..SYNTHETIC_CLASSES)
        .map(|c| Prototype {
            theta: PI * (c / 2) as f64 / 5.0 + rng.random_range(-0.05..0.05),
            freq: if c % 2 == 0 { 0.12 } else { 0.22 },
        })
        .collect()
}

fn class_image(rng: &mut ChaCha8Rng, [c, h, w]: Dims, proto: &Prototype) -> Vec<f32> {
    let cx = w as f64 / 2.0 + rng.random_range(-0.2..0.2) * w as f64;
    let cy = h as f64 / 2.0 + rng.random_range(-0.2..0.2) * h as f64;
    let theta = proto.theta + rng.random_range(-0.15..0.15);
    let phase = rng.random::<f64>() * 2.0 * PI;
    let sigma = h.max(w) as f64 * rng.random_range(0.2..0.35);
    let contrast = rng.random_range(0.6..1.0);
    let mut out = Vec::with_capacity(c * h * w);
    for _ in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = gabor(x as f64, y as f64, [cx, cy, theta, proto.freq, phase, sigma]);
                let noise: f64 = StandardNormal.sample(rng);
                out.push((0.5 + 0.4 * contrast * v + 0.15 * noise).clamp(0.0, 1.0) as f32);
            }
        }
    }
    out
}
