//! Feed-forward DAG of layer specifications.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-sample activation shape `(channels, height, width)`.
pub type Dims = [usize; 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LayerKind {
    Input {
        shape: Dims,
    },
    Conv {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        pad: usize,
    },
    Fc {
        out_units: usize,
    },
    Relu,
    #[serde(rename = "maxpool")]
    MaxPool {
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
    },
    #[serde(rename = "avgpool")]
    AvgPool {
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
    },
    Lrn {
        local_size: usize,
        alpha: f64,
        beta: f64,
        k: f64,
    },
    Dropout {
        ratio: f64,
    },
    Concat,
    Scale {
        factor: f64,
    },
}

fn one() -> usize {
    1
}

impl LayerKind {
    pub fn type_name(&self) -> &'static str {
        match self {
            LayerKind::Input { .. } => "input",
            LayerKind::Conv { .. } => "conv",
            LayerKind::Fc { .. } => "fc",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::AvgPool { .. } => "avgpool",
            LayerKind::Lrn { .. } => "lrn",
            LayerKind::Dropout { .. } => "dropout",
            LayerKind::Concat => "concat",
            LayerKind::Scale { .. } => "scale",
        }
    }

    /// Convolution and fully-connected layers are the only parameterized kinds.
    pub fn is_affine(&self) -> bool {
        matches!(self, LayerKind::Conv { .. } | LayerKind::Fc { .. })
    }

    /// `f(c x) = c f(x)` for every `c > 0`.
    pub fn is_positively_homogeneous(&self) -> bool {
        matches!(
            self,
            LayerKind::Relu
                | LayerKind::MaxPool { .. }
                | LayerKind::AvgPool { .. }
                | LayerKind::Dropout { .. }
                | LayerKind::Scale { .. }
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    #[serde(default)]
    pub inputs: Vec<String>,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind, inputs: &[&str]) -> Self {
        LayerSpec {
            name: name.into(),
            kind,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Output spatial size of a convolution, `None` when the window does not fit.
pub fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
}

/// Output spatial size of a pooling layer. Windows are placed in ceil mode and
/// clipped at the border, so a trailing partial window is kept as long as it
/// starts inside the input.
pub fn pool_out(size: usize, kernel: usize, stride: usize) -> Option<usize> {
    if size < kernel || stride == 0 {
        return None;
    }
    let mut out = (size - kernel).div_ceil(stride) + 1;
    if (out - 1) * stride >= size {
        out -= 1;
    }
    Some(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkGraph {
    name: String,
    layers: Vec<LayerSpec>,
    index: HashMap<String, usize>,
    order: Vec<usize>,
    consumers: Vec<Vec<usize>>,
    dims: Vec<Dims>,
    input: usize,
    output: usize,
}

impl NetworkGraph {
    /// Validate the layers and compute the topological order and shapes.
    pub fn new(name: impl Into<String>, layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::EmptyGraph);
        }
        let mut index = HashMap::with_capacity(layers.len());
        for (i, l) in layers.iter().enumerate() {
            if index.insert(l.name.clone(), i).is_some() {
                return Err(Error::layer(&l.name, "duplicate layer name"));
            }
        }

        let mut consumers = vec![Vec::new(); layers.len()];
        let mut producers = vec![Vec::new(); layers.len()];
        let mut inputs = Vec::new();
        for (i, l) in layers.iter().enumerate() {
            match (&l.kind, l.inputs.len()) {
                (LayerKind::Input { .. }, 0) => inputs.push(i),
                (LayerKind::Input { .. }, _) => return Err(Error::layer(&l.name, "input layer cannot have inputs")),
                (LayerKind::Concat, 0) => return Err(Error::layer(&l.name, "concat needs at least one input")),
                (LayerKind::Concat, _) => {}
                (_, 1) => {}
                (_, n) => return Err(Error::layer(&l.name, format!("expected exactly one input, got {n}"))),
            }
            for src in &l.inputs {
                let &j = index.get(src).ok_or_else(|| Error::DanglingInput {
                    layer: l.name.clone(),
                    input: src.clone(),
                })?;
                producers[i].push(j);
                consumers[j].push(i);
            }
        }
        let input = match inputs.as_slice() {
            [i] => *i,
            [] => return Err(Error::Config("graph has no input layer".into())),
            _ => return Err(Error::Config("graph has more than one input layer".into())),
        };

        // Kahn's algorithm; ties broken by declaration order so the order is stable.
        let mut indegree: Vec<usize> = producers.iter().map(Vec::len).collect();
        let mut ready: std::collections::BTreeSet<usize> = (0..layers.len()).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(layers.len());
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for &c in &consumers[i] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.insert(c);
                }
            }
        }
        if order.len() != layers.len() {
            let stuck = (0..layers.len()).find(|&i| indegree[i] > 0).unwrap();
            return Err(Error::Cycle(layers[stuck].name.clone()));
        }

        let sinks: Vec<usize> = (0..layers.len()).filter(|&i| consumers[i].is_empty()).collect();
        let output = match sinks.as_slice() {
            [o] => *o,
            _ => {
                return Err(Error::AmbiguousOutput(
                    sinks.iter().map(|&i| layers[i].name.clone()).collect(),
                ))
            }
        };

        let mut dims = vec![[0; 3]; layers.len()];
        for &i in &order {
            let l = &layers[i];
            let ins: Vec<Dims> = producers[i].iter().map(|&j| dims[j]).collect();
            dims[i] = infer_dims(l, &ins)?;
        }

        Ok(NetworkGraph {
            name: name.into(),
            layers,
            index,
            order,
            consumers,
            dims,
            input,
            output,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Layers in declaration order.
    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Layers in topological order.
    pub fn topo(&self) -> impl Iterator<Item = &LayerSpec> + '_ {
        self.order.iter().map(|&i| &self.layers[i])
    }

    pub fn topo_names(&self) -> Vec<&str> {
        self.topo().map(|l| l.name.as_str()).collect()
    }

    /// Affine layer names in topological order.
    pub fn affine_layers(&self) -> Vec<&str> {
        self.topo()
            .filter(|l| l.kind.is_affine())
            .map(|l| l.name.as_str())
            .collect()
    }

    pub fn layer(&self, name: &str) -> Result<&LayerSpec> {
        self.index
            .get(name)
            .map(|&i| &self.layers[i])
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn input_name(&self) -> &str {
        &self.layers[self.input].name
    }

    pub fn output_name(&self) -> &str {
        &self.layers[self.output].name
    }

    pub fn input_dims(&self) -> Dims {
        self.dims[self.input]
    }

    pub fn output_dims(&self) -> Dims {
        self.dims[self.output]
    }

    /// Per-sample output shape of a layer.
    pub fn dims(&self, name: &str) -> Result<Dims> {
        self.index
            .get(name)
            .map(|&i| self.dims[i])
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    /// Per-sample shape of the single input of a non-concat layer.
    pub fn in_dims(&self, name: &str) -> Result<Dims> {
        let l = self.layer(name)?;
        let src = l
            .inputs
            .first()
            .ok_or_else(|| Error::layer(name, "layer has no input"))?;
        self.dims(src)
    }

    pub fn consumers(&self, name: &str) -> Result<Vec<&str>> {
        let &i = self
            .index
            .get(name)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))?;
        Ok(self.consumers[i]
            .iter()
            .map(|&c| self.layers[c].name.as_str())
            .collect())
    }

    /// `(rows, fan_in)` of an affine layer's weight matrix.
    pub fn weight_matrix_dims(&self, name: &str) -> Result<(usize, usize)> {
        let l = self.layer(name)?;
        let [c, h, w] = self.in_dims(name)?;
        match l.kind {
            LayerKind::Conv {
                out_channels, kernel, ..
            } => Ok((out_channels, c * kernel * kernel)),
            LayerKind::Fc { out_units } => Ok((out_units, c * h * w)),
            _ => Err(Error::NotAffine(name.to_string())),
        }
    }

    /// Full weight tensor shape of an affine layer.
    pub fn weight_shape(&self, name: &str) -> Result<Vec<usize>> {
        let l = self.layer(name)?;
        let [c, _, _] = self.in_dims(name)?;
        match l.kind {
            LayerKind::Conv {
                out_channels, kernel, ..
            } => Ok(vec![out_channels, c, kernel, kernel]),
            LayerKind::Fc { .. } => {
                let (rows, fan_in) = self.weight_matrix_dims(name)?;
                Ok(vec![rows, fan_in])
            }
            _ => Err(Error::NotAffine(name.to_string())),
        }
    }

    /// Insert `spec` between `after` and all of its current consumers.
    pub fn insert_after(&self, after: &str, spec: LayerSpec) -> Result<NetworkGraph> {
        if self.contains(&spec.name) {
            return Err(Error::layer(&spec.name, "duplicate layer name"));
        }
        let pos = *self
            .index
            .get(after)
            .ok_or_else(|| Error::UnknownLayer(after.to_string()))?;
        let mut layers = self.layers.clone();
        for l in layers.iter_mut() {
            for src in l.inputs.iter_mut() {
                if src == after {
                    *src = spec.name.clone();
                }
            }
        }
        layers.insert(pos + 1, spec);
        NetworkGraph::new(self.name.clone(), layers)
    }

    /// Replace the factor of an existing scale layer.
    pub fn set_scale(&mut self, name: &str, factor: f64) -> Result<()> {
        let &i = self
            .index
            .get(name)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))?;
        match &mut self.layers[i].kind {
            LayerKind::Scale { factor: f } => {
                *f = factor;
                Ok(())
            }
            _ => Err(Error::layer(name, "not a scale layer")),
        }
    }
}

fn infer_dims(l: &LayerSpec, ins: &[Dims]) -> Result<Dims> {
    let bad = |reason: &str| Error::layer(&l.name, reason);
    let single = || ins[0];
    let dims = match l.kind {
        LayerKind::Input { shape } => {
            if shape.contains(&0) {
                return Err(bad("input shape must be positive"));
            }
            shape
        }
        LayerKind::Conv {
            out_channels,
            kernel,
            stride,
            pad,
        } => {
            if out_channels == 0 || kernel == 0 || stride == 0 {
                return Err(bad("out_channels, kernel and stride must be positive"));
            }
            let [_, h, w] = single();
            let oh = conv_out(h, kernel, stride, pad).ok_or_else(|| bad("kernel larger than input"))?;
            let ow = conv_out(w, kernel, stride, pad).ok_or_else(|| bad("kernel larger than input"))?;
            [out_channels, oh, ow]
        }
        LayerKind::Fc { out_units } => {
            if out_units == 0 {
                return Err(bad("out_units must be positive"));
            }
            [out_units, 1, 1]
        }
        LayerKind::MaxPool { kernel, stride } | LayerKind::AvgPool { kernel, stride } => {
            if kernel == 0 || stride == 0 {
                return Err(bad("kernel and stride must be positive"));
            }
            let [c, h, w] = single();
            let oh = pool_out(h, kernel, stride).ok_or_else(|| bad("kernel larger than input"))?;
            let ow = pool_out(w, kernel, stride).ok_or_else(|| bad("kernel larger than input"))?;
            [c, oh, ow]
        }
        LayerKind::Lrn {
            local_size,
            alpha,
            beta,
            k,
        } => {
            if local_size == 0 || local_size % 2 == 0 {
                return Err(bad("local_size must be odd"));
            }
            if !(alpha.is_finite() && beta.is_finite() && k.is_finite()) {
                return Err(bad("lrn parameters must be finite"));
            }
            single()
        }
        LayerKind::Dropout { ratio } => {
            if !(0.0..1.0).contains(&ratio) {
                return Err(bad("dropout ratio must be in [0, 1)"));
            }
            single()
        }
        LayerKind::Scale { factor } => {
            if !factor.is_finite() {
                return Err(bad("scale factor must be finite"));
            }
            single()
        }
        LayerKind::Relu => single(),
        LayerKind::Concat => {
            let [_, h, w] = ins[0];
            if ins.iter().any(|d| d[1] != h || d[2] != w) {
                return Err(bad("concat inputs must share spatial dimensions"));
            }
            [ins.iter().map(|d| d[0]).sum(), h, w]
        }
    };
    Ok(dims)
}
