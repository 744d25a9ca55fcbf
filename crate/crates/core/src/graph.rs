//! Chain-structured model graphs: layer specifications, VGG presets, shape
//! inference and parameter counting.
//!
//! Activations are NHWC and convolution weights are stored `[kh, kw, in, out]`,
//! so a convolution's weight tensor reshaped to `(kh·kw·in) × out` is directly
//! the right-hand operand of the im2col product.

use std::fmt;
use std::str::FromStr;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f32 = 1e-5;

/// Spatial padding mode. Only `SAME` is used by the presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub id: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: Padding,
    /// `[kernel_h, kernel_w, in_channels, out_channels]`
    pub weights: Tensor,
    /// `[out_channels]`
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub id: String,
    pub channels: usize,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub moving_mean: Tensor,
    pub moving_var: Tensor,
    pub eps: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaxPool {
    pub id: String,
    pub pool: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub id: String,
    pub in_features: usize,
    pub out_features: usize,
    /// `[in_features, out_features]`
    pub weights: Tensor,
    /// `[out_features]`
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    BatchNorm(BatchNorm),
    Relu { id: String },
    MaxPool(MaxPool),
    Flatten { id: String },
    Dense(Dense),
}

impl Layer {
    pub fn id(&self) -> &str {
        match self {
            Layer::Conv2d(c) => &c.id,
            Layer::BatchNorm(b) => &b.id,
            Layer::Relu { id } | Layer::Flatten { id } => id,
            Layer::MaxPool(p) => &p.id,
            Layer::Dense(d) => &d.id,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::BatchNorm(_) => "batch_norm",
            Layer::Relu { .. } => "relu",
            Layer::MaxPool(_) => "max_pool",
            Layer::Flatten { .. } => "flatten",
            Layer::Dense(_) => "dense",
        }
    }

    /// Named weight tensors in serialization order.
    pub fn weights(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            Layer::Conv2d(c) => vec![("weights", &c.weights), ("bias", &c.bias)],
            Layer::BatchNorm(b) => vec![
                ("gamma", &b.gamma),
                ("beta", &b.beta),
                ("moving_mean", &b.moving_mean),
                ("moving_var", &b.moving_var),
            ],
            Layer::Dense(d) => vec![("weights", &d.weights), ("bias", &d.bias)],
            _ => Vec::new(),
        }
    }

    pub fn weights_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        match self {
            Layer::Conv2d(c) => vec![("weights", &mut c.weights), ("bias", &mut c.bias)],
            Layer::BatchNorm(b) => vec![
                ("gamma", &mut b.gamma),
                ("beta", &mut b.beta),
                ("moving_mean", &mut b.moving_mean),
                ("moving_var", &mut b.moving_var),
            ],
            Layer::Dense(d) => vec![("weights", &mut d.weights), ("bias", &mut d.bias)],
            _ => Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Layer::Conv2d(c) => c.kernel_h * c.kernel_w * c.in_channels * c.out_channels + c.out_channels,
            Layer::BatchNorm(b) => 4 * b.channels,
            Layer::Dense(d) => d.in_features * d.out_features + d.out_features,
            _ => 0,
        }
    }

    /// Output NHWC (or `[N, F]`) shape for the given input shape.
    pub fn output_shape(&self, input: &[usize], producer: &str) -> Result<Vec<usize>> {
        let mismatch = |detail: String| Error::Shape {
            producer: producer.to_string(),
            consumer: self.id().to_string(),
            detail,
        };
        match self {
            Layer::Conv2d(c) => {
                let [n, h, w, ch] = rank4(input).ok_or_else(|| mismatch(format!("expected rank-4 input, got {input:?}")))?;
                if ch != c.in_channels {
                    return Err(mismatch(format!("{} channels in, layer expects {}", ch, c.in_channels)));
                }
                let (oh, ow) = match c.padding {
                    Padding::Same => (h.div_ceil(c.stride), w.div_ceil(c.stride)),
                    Padding::Valid => {
                        if h < c.kernel_h || w < c.kernel_w {
                            return Err(mismatch(format!("input {h}x{w} smaller than kernel")));
                        }
                        ((h - c.kernel_h) / c.stride + 1, (w - c.kernel_w) / c.stride + 1)
                    }
                };
                Ok(vec![n, oh, ow, c.out_channels])
            }
            Layer::BatchNorm(b) => {
                let last = *input.last().ok_or_else(|| mismatch("empty input shape".into()))?;
                if last != b.channels {
                    return Err(mismatch(format!("{} channels in, layer expects {}", last, b.channels)));
                }
                Ok(input.to_vec())
            }
            Layer::Relu { .. } => Ok(input.to_vec()),
            Layer::MaxPool(p) => {
                let [n, h, w, ch] = rank4(input).ok_or_else(|| mismatch(format!("expected rank-4 input, got {input:?}")))?;
                if h < p.pool || w < p.pool {
                    return Err(mismatch(format!("input {h}x{w} smaller than pool window {}", p.pool)));
                }
                Ok(vec![n, (h - p.pool) / p.stride + 1, (w - p.pool) / p.stride + 1, ch])
            }
            Layer::Flatten { .. } => {
                let n = *input.first().ok_or_else(|| mismatch("empty input shape".into()))?;
                Ok(vec![n, input[1..].iter().product()])
            }
            Layer::Dense(d) => {
                if input.len() != 2 || input[1] != d.in_features {
                    return Err(mismatch(format!(
                        "input {:?} does not match in_features {}",
                        input, d.in_features
                    )));
                }
                Ok(vec![input[0], d.out_features])
            }
        }
    }
}

fn rank4(shape: &[usize]) -> Option<[usize; 4]> {
    <[usize; 4]>::try_from(shape).ok()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Imagenet,
    Cifar,
    Tiny,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "imagenet" => Ok(Preset::Imagenet),
            "cifar" => Ok(Preset::Cifar),
            "tiny" => Ok(Preset::Tiny),
            other => Err(Error::invalid(format!("unknown preset `{other}`"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Imagenet => "imagenet",
            Preset::Cifar => "cifar",
            Preset::Tiny => "tiny",
        })
    }
}

impl Preset {
    /// `[H, W, C]` of the preset's input.
    pub fn input_shape(self) -> [usize; 3] {
        match self {
            Preset::Imagenet => [224, 224, 3],
            Preset::Cifar | Preset::Tiny => [32, 32, 3],
        }
    }
}

/// VGG-16 convolution widths; `0` marks a 2×2 max pool.
const VGG16_PLAN: [usize; 18] = [
    64, 64, 0, 128, 128, 0, 256, 256, 256, 0, 512, 512, 512, 0, 512, 512, 512, 0,
];
const TINY_PLAN: [usize; 6] = [16, 0, 32, 0, 64, 0];

/// An ordered chain of layers together with its input shape and class count.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    pub layers: Vec<Layer>,
    /// `[H, W, C]`
    pub input_shape: [usize; 3],
    pub num_classes: usize,
}

impl ModelGraph {
    pub fn preset(preset: Preset, num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid(format!("num_classes must be >= 2, got {num_classes}")));
        }
        let mut builder = ChainBuilder::new(seed);
        let input_shape = preset.input_shape();
        let plan: &[usize] = match preset {
            Preset::Imagenet | Preset::Cifar => &VGG16_PLAN,
            Preset::Tiny => &TINY_PLAN,
        };
        let mut channels = input_shape[2];
        let (mut h, mut w) = (input_shape[0], input_shape[1]);
        for &width in plan {
            if width == 0 {
                builder.max_pool();
                h /= 2;
                w /= 2;
            } else {
                builder.conv_bn_relu(channels, width);
                channels = width;
            }
        }
        builder.flatten();
        let flat = h * w * channels;
        match preset {
            Preset::Imagenet => {
                builder.dense(flat, 4096, true);
                builder.dense(4096, 4096, true);
                builder.dense(4096, num_classes, false);
            }
            Preset::Cifar | Preset::Tiny => {
                builder.dense(flat, num_classes, false);
            }
        }
        let graph = ModelGraph {
            layers: builder.finish(),
            input_shape,
            num_classes,
        };
        graph.validate()?;
        Ok(graph)
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layer(&self, id: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.id() == id)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.id() == id)
    }

    pub fn convs(&self) -> impl Iterator<Item = &Conv2d> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Conv2d(c) => Some(c),
            _ => None,
        })
    }

    /// NHWC output shape after every layer for a batch of `batch` inputs.
    pub fn infer_shapes(&self, batch: usize) -> Result<Vec<Vec<usize>>> {
        if batch == 0 {
            return Err(Error::invalid("batch must be positive"));
        }
        let [h, w, c] = self.input_shape;
        let mut current = vec![batch, h, w, c];
        let mut producer = "input".to_string();
        let mut shapes = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            current = layer.output_shape(&current, &producer)?;
            producer = layer.id().to_string();
            shapes.push(current.clone());
        }
        Ok(shapes)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Checks every structural invariant of a well-formed model.
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 1 {
            return Err(Error::invalid("num_classes must be positive"));
        }
        let mut seen = std::collections::HashSet::new();
        for layer in &self.layers {
            if !seen.insert(layer.id()) {
                return Err(Error::structure(layer.id(), "duplicate layer id"));
            }
            check_weights(layer)?;
        }
        self.infer_shapes(1)?;
        match self.layers.last() {
            Some(Layer::Dense(d)) if d.out_features == self.num_classes => {}
            Some(other) => {
                return Err(Error::structure(
                    other.id(),
                    format!("final layer must be a dense layer with {} outputs", self.num_classes),
                ))
            }
            None => return Err(Error::structure("<graph>", "graph has no layers")),
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if let Layer::Conv2d(c) = layer {
                match self.layers.get(i + 1) {
                    Some(Layer::BatchNorm(_)) => {}
                    _ => return Err(Error::structure(&c.id, "convolution is not followed by a batch norm")),
                }
            }
        }
        Ok(())
    }

    /// Hex digest of the graph's structure (kinds, ids, hyperparameters and
    /// shapes, not weight values).
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(format!("{:?}|{}", self.input_shape, self.num_classes));
        for layer in &self.layers {
            hasher.update(format!("|{}:{}", layer.kind(), layer.id()));
            match layer {
                Layer::Conv2d(c) => hasher.update(format!(
                    "{},{},{},{},{},{:?}",
                    c.in_channels, c.out_channels, c.kernel_h, c.kernel_w, c.stride, c.padding
                )),
                Layer::BatchNorm(b) => hasher.update(format!("{}", b.channels)),
                Layer::MaxPool(p) => hasher.update(format!("{},{}", p.pool, p.stride)),
                Layer::Dense(d) => hasher.update(format!("{},{}", d.in_features, d.out_features)),
                Layer::Relu { .. } | Layer::Flatten { .. } => {}
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Re-draws every weight tensor from the default initialization scheme,
    /// keeping the structure.
    pub fn reinitialize(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut self.layers {
            match layer {
                Layer::Conv2d(c) => {
                    c.weights = he_uniform(&mut rng, c.kernel_h, c.kernel_w, c.in_channels, c.out_channels);
                    c.bias = Tensor::zeros(vec![c.out_channels]);
                }
                Layer::BatchNorm(b) => *b = batch_norm(&b.id, b.channels),
                Layer::Dense(d) => {
                    d.weights = glorot_uniform(&mut rng, d.in_features, d.out_features);
                    d.bias = Tensor::zeros(vec![d.out_features]);
                }
                _ => {}
            }
        }
    }
}

fn check_weights(layer: &Layer) -> Result<()> {
    let expect = |name: &str, t: &Tensor, shape: &[usize]| -> Result<()> {
        if t.shape() != shape {
            return Err(Error::structure(
                layer.id(),
                format!("{name} has shape {:?}, expected {:?}", t.shape(), shape),
            ));
        }
        if !t.is_finite() {
            return Err(Error::structure(layer.id(), format!("{name} holds non-finite values")));
        }
        Ok(())
    };
    match layer {
        Layer::Conv2d(c) => {
            if c.kernel_h == 0 || c.kernel_w == 0 || c.stride == 0 || c.in_channels == 0 || c.out_channels == 0 {
                return Err(Error::structure(&c.id, "convolution dimensions must be positive"));
            }
            expect("weights", &c.weights, &[c.kernel_h, c.kernel_w, c.in_channels, c.out_channels])?;
            expect("bias", &c.bias, &[c.out_channels])
        }
        Layer::BatchNorm(b) => {
            for (name, t) in layer.weights() {
                expect(name, t, &[b.channels])?;
            }
            if b.moving_var.data().iter().any(|&v| v < 0.0) {
                return Err(Error::structure(&b.id, "moving_var has negative entries"));
            }
            if b.eps <= 0.0 {
                return Err(Error::structure(&b.id, "eps must be positive"));
            }
            Ok(())
        }
        Layer::MaxPool(p) if p.pool == 0 || p.stride == 0 => Err(Error::structure(&p.id, "pool and stride must be positive")),
        Layer::Dense(d) => {
            expect("weights", &d.weights, &[d.in_features, d.out_features])?;
            expect("bias", &d.bias, &[d.out_features])
        }
        _ => Ok(()),
    }
}

pub(crate) fn he_uniform(rng: &mut ChaCha8Rng, kh: usize, kw: usize, cin: usize, cout: usize) -> Tensor {
    let fan_in = (kh * kw * cin) as f32;
    let limit = (6.0 / fan_in).sqrt();
    uniform(rng, vec![kh, kw, cin, cout], limit)
}

pub(crate) fn glorot_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f32).sqrt();
    uniform(rng, vec![fan_in, fan_out], limit)
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, limit: f32) -> Tensor {
    let dist = Uniform::new_inclusive(-limit, limit);
    let len = shape.iter().product();
    let data = (0..len).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("length matches shape")
}

pub(crate) fn batch_norm(id: &str, channels: usize) -> BatchNorm {
    BatchNorm {
        id: id.to_string(),
        channels,
        gamma: Tensor::filled(vec![channels], 1.0),
        beta: Tensor::zeros(vec![channels]),
        moving_mean: Tensor::zeros(vec![channels]),
        moving_var: Tensor::filled(vec![channels], 1.0),
        eps: BN_EPS,
    }
}

/// Appends layers with sequential ids (`conv1`, `bn1`, `relu1`, `pool1`, ...).
///
/// The builder is public so tests and examples can assemble small graphs
/// without spelling out every weight tensor.
pub struct ChainBuilder {
    rng: ChaCha8Rng,
    layers: Vec<Layer>,
    convs: usize,
    pools: usize,
    denses: usize,
}

impl ChainBuilder {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            layers: Vec::new(),
            convs: 0,
            pools: 0,
            denses: 0,
        }
    }

    pub fn conv(&mut self, cin: usize, cout: usize, kernel: usize) -> &mut Self {
        self.convs += 1;
        let weights = he_uniform(&mut self.rng, kernel, kernel, cin, cout);
        self.layers.push(Layer::Conv2d(Conv2d {
            id: format!("conv{}", self.convs),
            in_channels: cin,
            out_channels: cout,
            kernel_h: kernel,
            kernel_w: kernel,
            stride: 1,
            padding: Padding::Same,
            weights,
            bias: Tensor::zeros(vec![cout]),
        }));
        self
    }

    pub fn batch_norm(&mut self, channels: usize) -> &mut Self {
        self.layers.push(Layer::BatchNorm(batch_norm(&format!("bn{}", self.convs), channels)));
        self
    }

    pub fn relu(&mut self) -> &mut Self {
        let id = match self.layers.last() {
            Some(Layer::Dense(_)) => format!("relu_d{}", self.denses),
            _ => format!("relu{}", self.convs),
        };
        self.layers.push(Layer::Relu { id });
        self
    }

    pub fn conv_bn_relu(&mut self, cin: usize, cout: usize) -> &mut Self {
        self.conv(cin, cout, 3).batch_norm(cout).relu()
    }

    pub fn max_pool(&mut self) -> &mut Self {
        self.pools += 1;
        self.layers.push(Layer::MaxPool(MaxPool {
            id: format!("pool{}", self.pools),
            pool: 2,
            stride: 2,
        }));
        self
    }

    pub fn flatten(&mut self) -> &mut Self {
        self.layers.push(Layer::Flatten { id: "flatten".into() });
        self
    }

    /// Adds a dense layer; `relu` appends an activation after it.
    pub fn dense(&mut self, fan_in: usize, fan_out: usize, relu: bool) -> &mut Self {
        self.denses += 1;
        let weights = glorot_uniform(&mut self.rng, fan_in, fan_out);
        self.layers.push(Layer::Dense(Dense {
            id: String::new(),
            in_features: fan_in,
            out_features: fan_out,
            weights,
            bias: Tensor::zeros(vec![fan_out]),
        }));
        if relu {
            self.relu();
        }
        self
    }

    pub fn finish(&mut self) -> Vec<Layer> {
        let mut layers = std::mem::take(&mut self.layers);
        let single = self.denses == 1;
        let mut seen = 0;
        for layer in &mut layers {
            if let Layer::Dense(d) = layer {
                seen += 1;
                d.id = if single { "dense".into() } else { format!("dense{seen}") };
            }
        }
        layers
    }

    pub fn build(&mut self, input_shape: [usize; 3], num_classes: usize) -> ModelGraph {
        ModelGraph {
            layers: self.finish(),
            input_shape,
            num_classes,
        }
    }
}
