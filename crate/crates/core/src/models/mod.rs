//! LeNet-5 teacher and LeNet-5-Half student.
//!
//! A [`Network`] is a validated chain of [`LayerSpec`]s plus the parameter
//! tensors of its convolution and dense layers, stored as `<layer>.weight`
//! then `<layer>.bias`. The softmax is applied outside the network so the
//! temperature can change between training and evaluation.

mod checkpoint;

use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, ZskdRng};
use crate::tensor::kernels::{conv_output_dim, pool_output_dim};
use crate::tensor::{ops, Graph, Padding, Tensor, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.1;
/// Truncation bound, in standard deviations.
pub const TRUNCATION_SIGMAS: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    /// Normal(0, std²) draws resampled until they fall within ±2·std.
    TruncatedNormal { std: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LayerSpec {
    Conv {
        kernel: usize,
        in_channels: usize,
        filters: usize,
        stride: usize,
        padding: Padding,
        init: Init,
    },
    MaxPool {
        size: usize,
        stride: usize,
    },
    Dense {
        inputs: usize,
        units: usize,
        init: Init,
    },
    Relu,
    Flatten,
}

impl LayerSpec {
    pub fn param_count(&self) -> usize {
        match *self {
            LayerSpec::Conv {
                kernel,
                in_channels,
                filters,
                ..
            } => kernel * kernel * in_channels * filters + filters,
            LayerSpec::Dense { inputs, units, .. } => inputs * units + units,
            _ => 0,
        }
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Conv {
                kernel,
                in_channels,
                filters,
                ..
            } => vec![vec![kernel, kernel, in_channels, filters], vec![filters]],
            LayerSpec::Dense { inputs, units, .. } => vec![vec![inputs, units], vec![units]],
            _ => Vec::new(),
        }
    }

    fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::MaxPool { .. } => "pool",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Relu => "relu",
            LayerSpec::Flatten => "flatten",
        }
    }
}

/// Activation shape between layers (per sample).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActShape {
    Spatial { h: usize, w: usize, c: usize },
    Flat(usize),
}

impl ActShape {
    pub fn len(&self) -> usize {
        match *self {
            ActShape::Spatial { h, w, c } => h * w * c,
            ActShape::Flat(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Walks the layer list and returns the activation shape after every layer.
pub fn shape_chain(input: [usize; 3], layers: &[LayerSpec]) -> Result<Vec<ActShape>> {
    let mut cur = ActShape::Spatial {
        h: input[0],
        w: input[1],
        c: input[2],
    };
    let mut out = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        let bad = |msg: String| Error::Dimension(format!("layer {i} ({}): {msg}", layer.kind_name()));
        cur = match (*layer, cur) {
            (
                LayerSpec::Conv {
                    kernel,
                    in_channels,
                    filters,
                    stride,
                    padding,
                    ..
                },
                ActShape::Spatial { h, w, c },
            ) => {
                if c != in_channels {
                    return Err(bad(format!("expects {in_channels} channels, receives {c}")));
                }
                let (oh, _) = conv_output_dim(h, kernel, stride, padding)
                    .ok_or_else(|| bad(format!("kernel {kernel} does not fit {h}x{w}")))?;
                let (ow, _) = conv_output_dim(w, kernel, stride, padding)
                    .ok_or_else(|| bad(format!("kernel {kernel} does not fit {h}x{w}")))?;
                ActShape::Spatial {
                    h: oh,
                    w: ow,
                    c: filters,
                }
            }
            (LayerSpec::MaxPool { size, stride }, ActShape::Spatial { h, w, c }) => {
                let oh = pool_output_dim(h, size, stride)
                    .ok_or_else(|| bad(format!("window {size} does not fit {h}x{w}")))?;
                let ow = pool_output_dim(w, size, stride)
                    .ok_or_else(|| bad(format!("window {size} does not fit {h}x{w}")))?;
                ActShape::Spatial { h: oh, w: ow, c }
            }
            (LayerSpec::Flatten, s) => ActShape::Flat(s.len()),
            (LayerSpec::Relu, s) => s,
            (LayerSpec::Dense { inputs, units, .. }, ActShape::Flat(n)) => {
                if n != inputs {
                    return Err(bad(format!("expects {inputs} inputs, receives {n}")));
                }
                ActShape::Flat(units)
            }
            (_, s) => return Err(bad(format!("cannot consume activation {s:?}"))),
        };
        out.push(cur);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    name: String,
    input_shape: [usize; 3],
    num_classes: usize,
    seed: u64,
    layers: Vec<LayerSpec>,
    params: Vec<Param>,
}

impl Network {
    /// Validates the layer chain and initialises parameters from `seed`.
    pub fn new(
        name: impl Into<String>,
        input_shape: [usize; 3],
        num_classes: usize,
        seed: u64,
        layers: Vec<LayerSpec>,
    ) -> Result<Self> {
        Self::validate(input_shape, num_classes, &layers)?;
        let mut rng = rng_from_seed(seed);
        let mut params = Vec::new();
        for (name, layer) in named_layers(&layers) {
            let init = match *layer {
                LayerSpec::Conv { init, .. } | LayerSpec::Dense { init, .. } => init,
                _ => continue,
            };
            let shapes = layer.param_shapes();
            let weight = initialise(&shapes[0], init, &mut rng);
            params.push(Param {
                name: format!("{name}.weight"),
                tensor: weight,
            });
            params.push(Param {
                name: format!("{name}.bias"),
                tensor: Tensor::zeros(shapes[1].clone()),
            });
        }
        Ok(Network {
            name: name.into(),
            input_shape,
            num_classes,
            seed,
            layers,
            params,
        })
    }

    /// Assembles a network from stored parts, checking every parameter shape.
    pub fn from_parts(
        name: impl Into<String>,
        input_shape: [usize; 3],
        num_classes: usize,
        seed: u64,
        layers: Vec<LayerSpec>,
        params: Vec<Param>,
    ) -> Result<Self> {
        Self::validate(input_shape, num_classes, &layers)?;
        let expected: Vec<(String, Vec<usize>)> = named_layers(&layers)
            .flat_map(|(name, l)| {
                let shapes = l.param_shapes();
                let names = [format!("{name}.weight"), format!("{name}.bias")];
                names.into_iter().zip(shapes).collect::<Vec<_>>()
            })
            .collect();
        if expected.len() != params.len() {
            return Err(Error::Dimension(format!(
                "layers need {} parameter tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in expected.iter().zip(&params) {
            if &p.name != name || p.tensor.shape() != shape.as_slice() {
                return Err(Error::Dimension(format!(
                    "parameter {} {:?} does not match expected {name} {shape:?}",
                    p.name,
                    p.tensor.shape()
                )));
            }
        }
        Ok(Network {
            name: name.into(),
            input_shape,
            num_classes,
            seed,
            layers,
            params,
        })
    }

    fn validate(input_shape: [usize; 3], num_classes: usize, layers: &[LayerSpec]) -> Result<()> {
        let chain = shape_chain(input_shape, layers)?;
        let last = chain.last().copied().unwrap_or(ActShape::Spatial {
            h: input_shape[0],
            w: input_shape[1],
            c: input_shape[2],
        });
        if last != ActShape::Flat(num_classes) {
            return Err(Error::Dimension(format!(
                "network ends in {last:?}, expected {num_classes} logits"
            )));
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        param_count(self)
    }

    pub fn shape_chain(&self) -> Vec<ActShape> {
        shape_chain(self.input_shape, &self.layers).expect("validated at construction")
    }

    /// Weight matrix `[n, K]` of the last dense layer; column `k` is the
    /// template of class `k`.
    pub fn final_layer_weights(&self) -> Result<&Tensor> {
        self.params
            .iter()
            .rev()
            .find(|p| p.name.ends_with(".weight") && p.tensor.rank() == 2)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::Dimension("network has no dense layer".into()))
    }

    /// SHA-256 over the layer manifest and every parameter's bytes.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("{:?}{:?}{}", self.layers, self.input_shape, self.num_classes).as_bytes());
        for p in &self.params {
            h.update(p.name.as_bytes());
            for v in p.tensor.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    fn batch_input<'a>(&self, batch: &'a Tensor) -> Result<std::borrow::Cow<'a, Tensor>> {
        let [h, w, c] = self.input_shape;
        match batch.shape() {
            [bh, bw, bc] if [*bh, *bw, *bc] == [h, w, c] => Ok(std::borrow::Cow::Owned(
                batch.clone().reshape([1, h, w, c])?,
            )),
            [_, bh, bw, bc] if [*bh, *bw, *bc] == [h, w, c] => Ok(std::borrow::Cow::Borrowed(batch)),
            s => Err(Error::Dimension(format!(
                "{} expects input [B,{h},{w},{c}], got {s:?}",
                self.name
            ))),
        }
    }

    /// Logits `[B, K]` without recording gradients.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let x = self.batch_input(batch)?;
        let b = x.shape()[0];
        let mut cur: Tensor = x.into_owned();
        let mut p = self.params.iter();
        for layer in &self.layers {
            cur = match *layer {
                LayerSpec::Conv {
                    stride, padding, ..
                } => {
                    let (w, bias) = (next(&mut p), next(&mut p));
                    ops::conv2d(&cur, w, bias, stride, padding)?
                }
                LayerSpec::MaxPool { size, stride } => ops::maxpool2d(&cur, size, stride)?,
                LayerSpec::Dense { .. } => {
                    let (w, bias) = (next(&mut p), next(&mut p));
                    ops::dense(&cur, w, bias)?
                }
                LayerSpec::Relu => ops::relu(&cur),
                LayerSpec::Flatten => {
                    let n = cur.len() / b;
                    cur.reshape([b, n])?
                }
            };
        }
        if !cur.is_finite() {
            return Err(Error::NonFinite(format!("{} produced non-finite logits", self.name)));
        }
        Ok(cur)
    }

    /// Logits and `softmax(logits / tau)`, both `[B, K]`.
    pub fn forward(&self, batch: &Tensor, tau: f64) -> Result<(Tensor, Tensor)> {
        let logits = self.logits(batch)?;
        let probs = ops::softmax_t(&logits, tau)?;
        Ok((logits, probs))
    }

    /// Records every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| g.leaf(p.tensor.clone().with_requires_grad(trainable)))
            .collect()
    }

    /// Records the forward pass of `input` (`[B,H,W,C]`) on `g` using
    /// parameter leaves from [`Network::bind`]; returns the logits node.
    pub fn logits_on(&self, g: &mut Graph, params: &[Var], input: Var) -> Result<Var> {
        if params.len() != self.params.len() {
            return Err(Error::Dimension(format!(
                "{} parameters bound, network has {}",
                params.len(),
                self.params.len()
            )));
        }
        let x = g.value(input);
        let [h, w, c] = self.input_shape;
        let b = match x.shape() {
            [b, bh, bw, bc] if [*bh, *bw, *bc] == [h, w, c] => *b,
            s => {
                return Err(Error::Dimension(format!(
                    "{} expects input [B,{h},{w},{c}], got {s:?}",
                    self.name
                )))
            }
        };
        let mut cur = input;
        let mut p = params.iter();
        for layer in &self.layers {
            cur = match *layer {
                LayerSpec::Conv {
                    stride, padding, ..
                } => {
                    let (w, bias) = (*p.next().unwrap(), *p.next().unwrap());
                    g.conv2d(cur, w, bias, stride, padding)?
                }
                LayerSpec::MaxPool { size, stride } => g.maxpool2d(cur, size, stride)?,
                LayerSpec::Dense { .. } => {
                    let (w, bias) = (*p.next().unwrap(), *p.next().unwrap());
                    g.dense(cur, w, bias)?
                }
                LayerSpec::Relu => g.relu(cur)?,
                LayerSpec::Flatten => {
                    let n = g.value(cur).len() / b;
                    g.reshape(cur, [b, n])?
                }
            };
        }
        Ok(cur)
    }
}

fn next<'a>(it: &mut std::slice::Iter<'a, Param>) -> &'a Tensor {
    &it.next().expect("parameter list matches layers").tensor
}

/// Names parametrised layers `conv1, conv2, ..., fc1, fc2, ...` in order.
fn named_layers(layers: &[LayerSpec]) -> impl Iterator<Item = (String, &LayerSpec)> {
    let (mut conv, mut fc) = (0, 0);
    layers.iter().filter_map(move |l| match l {
        LayerSpec::Conv { .. } => {
            conv += 1;
            Some((format!("conv{conv}"), l))
        }
        LayerSpec::Dense { .. } => {
            fc += 1;
            Some((format!("fc{fc}"), l))
        }
        _ => None,
    })
}

fn initialise(shape: &[usize], init: Init, rng: &mut ZskdRng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = match init {
        Init::Zeros => vec![0.0; n],
        Init::TruncatedNormal { std } => (0..n).map(|_| truncated_normal(rng) * std).collect(),
    };
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

fn truncated_normal(rng: &mut ZskdRng) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= TRUNCATION_SIGMAS {
            return z;
        }
    }
}

pub fn param_count(net: &Network) -> usize {
    net.params.iter().map(|p| p.tensor.len()).sum()
}

fn lenet(name: &str, conv1: usize, conv2: usize, seed: u64) -> Network {
    let init = Init::TruncatedNormal { std: INIT_STD };
    let conv = |in_channels, filters| LayerSpec::Conv {
        kernel: 5,
        in_channels,
        filters,
        stride: 1,
        padding: Padding::Valid,
        init,
    };
    let pool = LayerSpec::MaxPool { size: 2, stride: 2 };
    let dense = |inputs, units| LayerSpec::Dense { inputs, units, init };
    let layers = vec![
        conv(1, conv1),
        LayerSpec::Relu,
        pool,
        conv(conv1, conv2),
        LayerSpec::Relu,
        pool,
        LayerSpec::Flatten,
        dense(5 * 5 * conv2, 120),
        LayerSpec::Relu,
        dense(120, 84),
        LayerSpec::Relu,
        dense(84, 10),
    ];
    Network::new(name, [32, 32, 1], 10, seed, layers).expect("LeNet geometry is consistent")
}

/// LeNet-5 teacher: 61 706 parameters.
pub fn build_lenet5(seed: u64) -> Network {
    lenet("lenet5", 6, 16, seed)
}

/// LeNet-5-Half student (half the filters of each convolution): 35 820 parameters.
pub fn build_lenet5_half(seed: u64) -> Network {
    lenet("lenet5-half", 3, 8, seed)
}
