//! Weight initializers: random baselines and data-driven PCA / spherical
//! k-means filters learned from activation patches.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{LayerKind, NetworkGraph};
use crate::network::{conv_geometry_of, forward, AffineParams, Mode, WeightStore};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_KMEANS_ITERS: usize = 50;
pub const DEFAULT_WHITEN_EPS: f64 = 1e-5;
/// Gaussian std used for layers a data-driven method does not cover.
pub const DEFAULT_FALLBACK_STD: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum InitMethod {
    Gaussian { std: f64 },
    Xavier,
    Msra,
    Pca,
    Kmeans { iters: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct InitConfig {
    pub method: InitMethod,
    pub seed: u64,
    /// Patches sampled per layer; `None` means `max(10_000, 20 * filters)`.
    pub patch_count: Option<usize>,
    pub whiten_eps: f64,
    /// Std of the Gaussian used on fully-connected layers by PCA / k-means.
    pub fallback_std: f64,
    /// Per-layer std overrides for the Gaussian method.
    pub layer_std: BTreeMap<String, f64>,
}

impl InitConfig {
    pub fn new(method: InitMethod, seed: u64) -> Self {
        InitConfig {
            method,
            seed,
            patch_count: None,
            whiten_eps: DEFAULT_WHITEN_EPS,
            fallback_std: DEFAULT_FALLBACK_STD,
            layer_std: BTreeMap::new(),
        }
    }

    fn validate(&self) -> Result<()> {
        if let InitMethod::Gaussian { std } = self.method {
            if !(std > 0.0 && std.is_finite()) {
                return Err(Error::Config(format!("gaussian std must be positive, got {std}")));
            }
        }
        if let InitMethod::Kmeans { iters } = self.method {
            if iters == 0 {
                return Err(Error::Config("kmeans iterations must be at least 1".into()));
            }
        }
        if self.whiten_eps.is_nan() || self.whiten_eps <= 0.0 {
            return Err(Error::Config("whitening epsilon must be positive".into()));
        }
        if self.layer_std.values().any(|s| s.is_nan() || *s <= 0.0) {
            return Err(Error::Config("per-layer std must be positive".into()));
        }
        Ok(())
    }

    fn patches_for(&self, filters: usize) -> usize {
        self.patch_count.unwrap_or((20 * filters).max(10_000))
    }
}

fn gaussian_params<T: Scalar>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> AffineParams<T> {
    let normal = Normal::new(0.0, std).expect("std validated");
    let len = shape.iter().product();
    AffineParams {
        weight: Tensor::from_vec(shape, (0..len).map(|_| T::from_f64(normal.sample(rng))).collect()),
        bias: Tensor::zeros(&[shape[0]]),
    }
}

fn layer_rng(seed: u64, method: &str, layer: &str) -> ChaCha8Rng {
    rng::stream(seed, &format!("init/{method}/{layer}"))
}

/// Every affine layer drawn from `N(0, std(layer)^2)` with zero biases.
fn init_with_std<T: Scalar>(
    graph: &NetworkGraph,
    seed: u64,
    method: &str,
    std_of: impl Fn(&str, &LayerKind, usize) -> f64,
) -> Result<WeightStore<T>> {
    let mut store = WeightStore::new();
    for name in graph.affine_layers() {
        let shape = graph.weight_shape(name)?;
        let (_, fan_in) = graph.weight_matrix_dims(name)?;
        let std = std_of(name, &graph.layer(name)?.kind, fan_in);
        let mut rng = layer_rng(seed, method, name);
        store.insert(name, gaussian_params(&shape, std, &mut rng));
    }
    Ok(store)
}

pub fn init_gaussian<T: Scalar>(graph: &NetworkGraph, std: f64, seed: u64) -> Result<WeightStore<T>> {
    if !(std > 0.0 && std.is_finite()) {
        return Err(Error::Config(format!("gaussian std must be positive, got {std}")));
    }
    init_with_std(graph, seed, "gaussian", |_, _, _| std)
}

/// Weight variance `1 / fan_in` on every affine layer.
pub fn init_xavier<T: Scalar>(graph: &NetworkGraph, seed: u64) -> Result<WeightStore<T>> {
    init_with_std(graph, seed, "xavier", |_, _, fan_in| (1.0 / fan_in as f64).sqrt())
}

/// Weight variance `2 / fan_in` on convolutions; fully-connected layers keep a
/// Gaussian with std 0.01.
pub fn init_msra<T: Scalar>(graph: &NetworkGraph, seed: u64) -> Result<WeightStore<T>> {
    init_with_std(graph, seed, "msra", |_, kind, fan_in| match kind {
        LayerKind::Conv { .. } => (2.0 / fan_in as f64).sqrt(),
        _ => DEFAULT_FALLBACK_STD,
    })
}

/// Affine transform `x -> transform * (x - mean)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Whitening {
    pub mean: Vec<f64>,
    /// Row-major `cols x cols`.
    pub transform: Vec<f64>,
}

/// Sampled receptive-field activations of one layer's input, one per row.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    pub whitening: Option<Whitening>,
}

impl PatchMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        PatchMatrix {
            rows: rows.len(),
            cols,
            data: rows.iter().flatten().copied().collect(),
            whitening: None,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (m, v) in mean.iter_mut().zip(self.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= self.rows as f64);
        mean
    }

    /// Population covariance of the rows.
    pub fn covariance(&self) -> DMatrix<f64> {
        let mean = self.mean();
        let mut x = self.matrix();
        for mut r in x.row_iter_mut() {
            for (v, m) in r.iter_mut().zip(&mean) {
                *v -= m;
            }
        }
        (x.transpose() * &x) / self.rows as f64
    }
}

/// Sample input patches of affine layer `layer` from a forward pass over
/// `batch`. Convolutions draw `(image, position)` pairs uniformly without
/// replacement; fully-connected layers use one full input vector per image.
pub fn extract_patches<T: Scalar>(
    graph: &NetworkGraph,
    weights: &WeightStore<T>,
    batch: &Tensor<T>,
    layer: &str,
    count: usize,
    seed: u64,
) -> Result<PatchMatrix> {
    let spec = graph.layer(layer)?;
    if !spec.kind.is_affine() {
        return Err(Error::NotAffine(layer.to_string()));
    }
    let cache = forward(graph, weights, batch, Mode::Eval)?;
    let x = cache.get(&spec.inputs[0])?;
    let n = x.dim0();
    let mut rng = rng::stream(seed, &format!("patches/{layer}"));
    match conv_geometry_of(graph, layer)? {
        Some(g) => {
            let (_, ow) = g.out_hw();
            let per_image = g.positions();
            let available = n * per_image;
            let picks: Vec<usize> = if count >= available {
                (0..available).collect()
            } else {
                let mut v = index::sample(&mut rng, available, count).into_vec();
                v.sort_unstable();
                v
            };
            let [_, h, w] = g.in_dims;
            let cols = g.fan_in();
            let mut data = Vec::with_capacity(picks.len() * cols);
            for p in &picks {
                let (s, pos) = (p / per_image, p % per_image);
                let (oy, ox) = (pos / ow, pos % ow);
                let img = x.row(s);
                for j in 0..cols {
                    data.push(
                        g.source(j, oy, ox)
                            .map_or(0.0, |(c, iy, ix)| img[(c * h + iy) * w + ix].as_f64()),
                    );
                }
            }
            Ok(PatchMatrix {
                rows: picks.len(),
                cols,
                data,
                whitening: None,
            })
        }
        None => {
            let rows = count.min(n);
            let picks: Vec<usize> = if rows == n {
                (0..n).collect()
            } else {
                let mut v = index::sample(&mut rng, n, rows).into_vec();
                v.sort_unstable();
                v
            };
            let cols = x.stride0();
            let data = picks
                .iter()
                .flat_map(|&s| x.row(s).iter().map(|v| v.as_f64()))
                .collect();
            Ok(PatchMatrix {
                rows,
                cols,
                data,
                whitening: None,
            })
        }
    }
}

/// Eigenpairs of a symmetric matrix sorted by decreasing eigenvalue.
fn sorted_eigen(cov: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_columns(
        &order
            .iter()
            .map(|&i| eig.eigenvectors.column(i).into_owned())
            .collect::<Vec<_>>(),
    );
    (values, vectors)
}

/// ZCA whitening: subtract the mean, then apply `U diag(1/sqrt(max(l, eps))) U^T`.
pub fn whiten(patches: &PatchMatrix, eps: f64) -> Result<PatchMatrix> {
    if patches.rows < 2 {
        return Err(Error::Config("whitening needs at least two patches".into()));
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Config("whitening epsilon must be positive".into()));
    }
    let mean = patches.mean();
    let (values, u) = sorted_eigen(patches.covariance());
    let scale = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        values.len(),
        values.iter().map(|&l| 1.0 / l.max(eps).sqrt()),
    ));
    let transform = &u * scale * u.transpose();
    let mut x = patches.matrix();
    for mut r in x.row_iter_mut() {
        for (v, m) in r.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let white = x * transform.transpose();
    let mut data = Vec::with_capacity(patches.rows * patches.cols);
    for r in white.row_iter() {
        data.extend(r.iter().copied());
    }
    let mut t = Vec::with_capacity(patches.cols * patches.cols);
    for r in transform.row_iter() {
        t.extend(r.iter().copied());
    }
    Ok(PatchMatrix {
        rows: patches.rows,
        cols: patches.cols,
        data,
        whitening: Some(Whitening { mean, transform: t }),
    })
}

/// Top principal directions of the centred patches, as unit rows ordered by
/// decreasing explained variance. The largest-magnitude coordinate of each
/// component is made positive.
pub fn principal_components(patches: &PatchMatrix, m: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let (values, u) = sorted_eigen(patches.covariance());
    let comps = (0..m)
        .map(|i| {
            let mut v: Vec<f64> = u.column(i).iter().copied().collect();
            let lead = v
                .iter()
                .copied()
                .max_by(|a, b| a.abs().total_cmp(&b.abs()))
                .unwrap_or(1.0);
            if lead < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();
    (comps, values[..m].to_vec())
}

#[derive(Clone, Debug)]
pub struct KmeansResult {
    /// Unit-norm centroids.
    pub centroids: Vec<Vec<f64>>,
    /// `sum_i max_c <x_i, c>` after each iteration.
    pub objective: Vec<f64>,
    pub assignment: Vec<usize>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalized(v: &[f64]) -> Option<Vec<f64>> {
    let n = dot(v, v).sqrt();
    (n > 0.0 && n.is_finite()).then(|| v.iter().map(|x| x / n).collect())
}

/// Random patch direction; falls back to a coordinate axis for all-zero data.
fn random_direction(patches: &PatchMatrix, rng: &mut ChaCha8Rng) -> Vec<f64> {
    for _ in 0..patches.rows.max(1) {
        if let Some(v) = normalized(patches.row(rng.random_range(0..patches.rows))) {
            return v;
        }
    }
    let mut e = vec![0.0; patches.cols];
    e[rng.random_range(0..patches.cols)] = 1.0;
    e
}

/// Spherical k-means: unit centroids, assignment by maximum dot product.
/// Centroids start at `k` distinct random patches; empty clusters are
/// reseeded from a random patch.
pub fn spherical_kmeans(patches: &PatchMatrix, k: usize, iters: usize, rng: &mut ChaCha8Rng) -> Result<KmeansResult> {
    if patches.rows < k || k == 0 {
        return Err(Error::NotEnoughPatches {
            layer: String::new(),
            needed: k,
            available: patches.rows,
        });
    }
    let mut centroids: Vec<Vec<f64>> = index::sample(rng, patches.rows, k)
        .into_iter()
        .map(|i| normalized(patches.row(i)).unwrap_or_else(|| random_direction(patches, rng)))
        .collect();
    let mut assignment = vec![0usize; patches.rows];
    let mut objective = Vec::with_capacity(iters);
    for _ in 0..iters {
        let mut total = 0.0;
        for (i, a) in assignment.iter_mut().enumerate() {
            let x = patches.row(i);
            let (best, score) = centroids
                .iter()
                .enumerate()
                .map(|(c, cen)| (c, dot(x, cen)))
                .fold((0, f64::NEG_INFINITY), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
            *a = best;
            total += score;
        }
        objective.push(total);
        let mut sums = vec![vec![0.0; patches.cols]; k];
        let mut counts = vec![0usize; k];
        for (i, &a) in assignment.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(patches.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                centroids[c] = random_direction(patches, rng);
            } else if let Some(v) = normalized(&sums[c]) {
                centroids[c] = v;
            }
        }
    }
    Ok(KmeansResult {
        centroids,
        objective,
        assignment,
    })
}

fn set_rows<T: Scalar>(weights: &mut WeightStore<T>, layer: &str, rows: &[Vec<f64>]) -> Result<()> {
    let p = weights.get_mut(layer)?;
    let fan_in = p.fan_in();
    for (i, r) in rows.iter().enumerate() {
        debug_assert_eq!(r.len(), fan_in);
        for (dst, &v) in p.weight.row_mut(i).iter_mut().zip(r) {
            *dst = T::from_f64(v);
        }
    }
    p.bias.data_mut().fill(T::zero());
    Ok(())
}

fn filters_and_fan_in(graph: &NetworkGraph, layer: &str) -> Result<(usize, usize)> {
    if !graph.layer(layer)?.kind.is_affine() {
        return Err(Error::NotAffine(layer.to_string()));
    }
    graph.weight_matrix_dims(layer)
}

/// Replace the filters of `layer` with the top principal components of its
/// input patches.
pub fn init_pca<T: Scalar>(
    graph: &NetworkGraph,
    weights: &mut WeightStore<T>,
    batch: &Tensor<T>,
    layer: &str,
    config: &InitConfig,
) -> Result<Vec<f64>> {
    let (m, fan_in) = filters_and_fan_in(graph, layer)?;
    if m > fan_in {
        return Err(Error::TooManyFilters {
            layer: layer.to_string(),
            filters: m,
            fan_in,
        });
    }
    let patches = extract_patches(graph, weights, batch, layer, config.patches_for(m), config.seed)?;
    if patches.rows < m.max(2) {
        return Err(Error::NotEnoughPatches {
            layer: layer.to_string(),
            needed: m.max(2),
            available: patches.rows,
        });
    }
    let (rows, variances) = principal_components(&patches, m);
    set_rows(weights, layer, &rows)?;
    Ok(variances)
}

/// Replace the filters of `layer` with spherical k-means centroids of its
/// whitened input patches.
pub fn init_kmeans<T: Scalar>(
    graph: &NetworkGraph,
    weights: &mut WeightStore<T>,
    batch: &Tensor<T>,
    layer: &str,
    config: &InitConfig,
) -> Result<KmeansResult> {
    let iters = match config.method {
        InitMethod::Kmeans { iters } => iters,
        _ => DEFAULT_KMEANS_ITERS,
    };
    let (k, _) = filters_and_fan_in(graph, layer)?;
    let patches = extract_patches(graph, weights, batch, layer, config.patches_for(k), config.seed)?;
    if patches.rows < k.max(2) {
        return Err(Error::NotEnoughPatches {
            layer: layer.to_string(),
            needed: k.max(2),
            available: patches.rows,
        });
    }
    let white = whiten(&patches, config.whiten_eps)?;
    let mut rng = layer_rng(config.seed, "kmeans", layer);
    let result = spherical_kmeans(&white, k, iters, &mut rng).map_err(|e| match e {
        Error::NotEnoughPatches { needed, available, .. } => Error::NotEnoughPatches {
            layer: layer.to_string(),
            needed,
            available,
        },
        e => e,
    })?;
    set_rows(weights, layer, &result.centroids)?;
    Ok(result)
}

/// Run the configured initializer over the whole graph. PCA and k-means are
/// applied to convolutions in topological order, each seeing activations of
/// the already-initialized layers below; fully-connected layers keep a
/// Gaussian.
pub fn initialize<T: Scalar>(
    graph: &NetworkGraph,
    batch: Option<&Tensor<T>>,
    config: &InitConfig,
) -> Result<WeightStore<T>> {
    config.validate()?;
    match config.method {
        InitMethod::Gaussian { std } => init_with_std(graph, config.seed, "gaussian", |name, _, _| {
            config.layer_std.get(name).copied().unwrap_or(std)
        }),
        InitMethod::Xavier => init_xavier(graph, config.seed),
        InitMethod::Msra => init_msra(graph, config.seed),
        InitMethod::Pca | InitMethod::Kmeans { .. } => {
            let batch = batch.ok_or_else(|| Error::Config("data-driven initialization needs a batch".into()))?;
            let mut weights = init_with_std(graph, config.seed, "fallback", |_, _, _| config.fallback_std)?;
            let convs: Vec<String> = graph
                .topo()
                .filter(|l| matches!(l.kind, LayerKind::Conv { .. }))
                .map(|l| l.name.clone())
                .collect();
            for layer in &convs {
                if matches!(config.method, InitMethod::Pca) {
                    init_pca(graph, &mut weights, batch, layer, config)?;
                } else {
                    init_kmeans(graph, &mut weights, batch, layer, config)?;
                }
            }
            Ok(weights)
        }
    }
}
