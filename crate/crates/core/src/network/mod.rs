//! The analysis/synthesis CNN.
//!
//! A [`FeatureNetwork`] is a chain of conv+ReLU and 2×2 pooling layers with
//! a set of named statistics layers whose outputs are captured by
//! [`FeatureNetwork::forward`]. [`FeatureNetwork::backward`] pulls
//! cotangents given at those layers back to the input. Only the input
//! gradient is ever needed; weights are fixed.

pub mod kernels;
mod mask;
mod weights;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use mask::{dilate_zeros, min_pool, MaskPyramid};

/// Per-channel means of the ImageNet training set in 0–255 RGB.
pub const IMAGENET_MEANS: [f64; 3] = [123.68, 116.779, 103.939];

/// Base gain of the random filter bank; entries have std `gain / sqrt(fan_in)`.
pub const RANDOM_WEIGHT_GAIN: f64 = std::f64::consts::SQRT_2;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kh: usize,
    pub kw: usize,
    /// (out, in, kh, kw) row-major.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl ConvLayer {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kh: usize,
        kw: usize,
        weights: Vec<f64>,
        biases: Vec<f64>,
    ) -> Result<Self> {
        if kh.is_multiple_of(2) || kw.is_multiple_of(2) {
            return Err(Error::Format(format!("kernel {kh}x{kw} must be odd-sized")));
        }
        if weights.len() != out_channels * in_channels * kh * kw || biases.len() != out_channels {
            return Err(Error::Format(format!(
                "conv {out_channels}x{in_channels}x{kh}x{kw}: got {} weights, {} biases",
                weights.len(),
                biases.len()
            )));
        }
        Ok(ConvLayer {
            out_channels,
            in_channels,
            kh,
            kw,
            weights,
            biases,
        })
    }

    #[inline]
    pub fn weight(&self, oc: usize, ic: usize, ky: usize, kx: usize) -> f64 {
        self.weights[((oc * self.in_channels + ic) * self.kh + ky) * self.kw + kx]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    /// Convolution followed by the network's activation.
    Conv(ConvLayer),
    /// 2×2 window, stride 2.
    Pool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn is_pool(&self) -> bool {
        matches!(self.kind, LayerKind::Pool)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PoolMode {
    #[default]
    Average,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
    /// Drops the ReLU; only useful for checking the backward pass as an
    /// exact adjoint.
    Identity,
}

/// Layer stack without weights, used to build random filter banks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Topology {
    pub layers: Vec<(String, Option<usize>)>,
}

impl Topology {
    /// `(name, Some(out_channels))` for a conv layer, `(name, None)` for a pool.
    pub fn new<S: Into<String>>(layers: impl IntoIterator<Item = (S, Option<usize>)>) -> Self {
        Topology {
            layers: layers.into_iter().map(|(n, c)| (n.into(), c)).collect(),
        }
    }

    /// VGG-19 convolutional body up to pool5.
    pub fn vgg19() -> Self {
        Topology::vgg19_narrow(1)
    }

    /// VGG-19 layer structure with every channel count divided by `divisor`.
    pub fn vgg19_narrow(divisor: usize) -> Self {
        let divisor = divisor.max(1);
        let blocks: [(usize, usize); 5] = [(2, 64), (2, 128), (4, 256), (4, 512), (4, 512)];
        let mut layers = Vec::new();
        for (b, &(convs, ch)) in blocks.iter().enumerate() {
            for i in 0..convs {
                layers.push((
                    format!("conv{}_{}", b + 1, i + 1),
                    Some((ch / divisor).max(1)),
                ));
            }
            layers.push((format!("pool{}", b + 1), None));
        }
        Topology { layers }
    }
}

/// Immutable after construction; clones share the layer weights.
#[derive(Clone, Debug)]
pub struct FeatureNetwork {
    layers: Arc<[LayerSpec]>,
    channel_means: [f64; 3],
    statistics: Vec<usize>,
    pooling: PoolMode,
    activation: Activation,
}

/// Default statistics layers, also the detail-branch default.
pub const DEFAULT_STATISTICS_LAYERS: [&str; 5] = ["conv1_1", "pool1", "pool2", "pool3", "pool4"];

/// Global-branch statistics layers suggested for very stochastic textures.
pub const STOCHASTIC_GLOBAL_LAYERS: [&str; 3] = ["pool3", "pool4", "pool5"];

impl FeatureNetwork {
    pub fn new(layers: Vec<LayerSpec>, channel_means: [f64; 3]) -> Result<Self> {
        let mut channels = 3;
        for layer in &layers {
            if let LayerKind::Conv(c) = &layer.kind {
                if c.in_channels != channels {
                    return Err(Error::Format(format!(
                        "layer {} expects {} input channels, previous layer gives {channels}",
                        layer.name, c.in_channels
                    )));
                }
                channels = c.out_channels;
            }
        }
        for (i, a) in layers.iter().enumerate() {
            if layers[..i].iter().any(|b| b.name == a.name) {
                return Err(Error::Format(format!("duplicate layer name {}", a.name)));
            }
        }
        if layers.is_empty() {
            return Err(Error::Format("network has no layers".into()));
        }
        let mut statistics: Vec<usize> = DEFAULT_STATISTICS_LAYERS
            .iter()
            .filter_map(|n| layers.iter().position(|l| l.name == *n))
            .collect();
        if statistics.is_empty() {
            statistics.push(layers.len() - 1);
        }
        Ok(FeatureNetwork {
            layers: layers.into(),
            channel_means,
            statistics,
            pooling: PoolMode::default(),
            activation: Activation::default(),
        })
    }

    /// Seeded random filter bank: weights ~ N(0, (gain/√fan_in)²), biases
    /// ~ N(0, 0.1²), both rounded to f32 so they survive a TXW1 round trip.
    pub fn random(seed: u64, topology: &Topology) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bias_dist = Normal::new(0.0, 0.1).expect("valid std");
        let mut layers = Vec::with_capacity(topology.layers.len());
        let mut channels = 3;
        for (name, conv) in &topology.layers {
            let kind = match *conv {
                Some(out) => {
                    let fan_in = channels * 9;
                    let dist = Normal::new(0.0, RANDOM_WEIGHT_GAIN / (fan_in as f64).sqrt())
                        .expect("valid std");
                    let weights = (0..out * fan_in)
                        .map(|_| dist.sample(&mut rng) as f32 as f64)
                        .collect();
                    let biases = (0..out)
                        .map(|_| bias_dist.sample(&mut rng) as f32 as f64)
                        .collect();
                    let layer = ConvLayer::new(out, channels, 3, 3, weights, biases)?;
                    channels = out;
                    LayerKind::Conv(layer)
                }
                None => LayerKind::Pool,
            };
            layers.push(LayerSpec {
                name: name.clone(),
                kind,
            });
        }
        FeatureNetwork::new(layers, IMAGENET_MEANS)
    }

    /// Returns a network sharing these weights that captures `names`.
    pub fn with_statistics_layers<S: AsRef<str>>(&self, names: &[S]) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::InvalidArgument("empty statistics layer set".into()));
        }
        let mut statistics = Vec::with_capacity(names.len());
        for n in names {
            let n = n.as_ref();
            let idx = self
                .layers
                .iter()
                .position(|l| l.name == n)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown layer {n}")))?;
            if statistics.last().is_some_and(|&last| idx <= last) {
                return Err(Error::InvalidArgument(format!(
                    "statistics layer {n} out of network order"
                )));
            }
            statistics.push(idx);
        }
        Ok(FeatureNetwork {
            statistics,
            ..self.clone()
        })
    }

    pub fn with_pooling(mut self, pooling: PoolMode) -> Self {
        self.pooling = pooling;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_channel_means(mut self, means: [f64; 3]) -> Self {
        self.channel_means = means;
        self
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn channel_means(&self) -> [f64; 3] {
        self.channel_means
    }

    pub fn pooling(&self) -> PoolMode {
        self.pooling
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Layer indices of the statistics layers, in network order.
    pub fn statistics_indices(&self) -> &[usize] {
        &self.statistics
    }

    pub fn statistics_names(&self) -> Vec<&str> {
        self.statistics
            .iter()
            .map(|&i| self.layers[i].name.as_str())
            .collect()
    }

    pub fn num_statistics(&self) -> usize {
        self.statistics.len()
    }

    fn deepest(&self) -> usize {
        *self.statistics.last().expect("nonempty statistics")
    }

    /// Number of poolings applied up to and including layer `idx`.
    pub fn pools_through(&self, idx: usize) -> usize {
        self.layers[..=idx].iter().filter(|l| l.is_pool()).count()
    }

    /// (channels, height, width) of each statistics layer for an input of
    /// the given spatial size.
    pub fn statistics_shapes(&self, height: usize, width: usize) -> Vec<(usize, usize, usize)> {
        let mut shapes = Vec::with_capacity(self.statistics.len());
        let (mut c, mut h, mut w) = (3, height, width);
        let mut next = 0;
        for (i, layer) in self.layers[..=self.deepest()].iter().enumerate() {
            match &layer.kind {
                LayerKind::Conv(conv) => c = conv.out_channels,
                LayerKind::Pool => {
                    h /= 2;
                    w /= 2;
                }
            }
            if self.statistics[next] == i {
                shapes.push((c, h, w));
                next += 1;
                if next == self.statistics.len() {
                    break;
                }
            }
        }
        shapes
    }

    /// Runs the network up to the deepest statistics layer.
    pub fn forward(&self, x: &Tensor) -> Result<ActivationTrace> {
        let (c, h, w) = x.shape();
        if c != 3 {
            return Err(Error::Shape(format!(
                "network input has {c} channels, expected 3"
            )));
        }
        let pools = self.pools_through(self.deepest());
        if h >> pools == 0 || w >> pools == 0 {
            return Err(Error::InputTooSmall {
                height: h,
                width: w,
                pools,
            });
        }
        let mut input = x.clone();
        for ch in 0..3 {
            let m = self.channel_means[ch];
            input.plane_mut(ch).iter_mut().for_each(|v| *v -= m);
        }
        let relu = self.activation == Activation::Relu;
        let deepest = self.deepest();
        let mut outputs: Vec<Tensor> = Vec::with_capacity(deepest + 1);
        let mut argmax: Vec<Option<Vec<u32>>> = Vec::with_capacity(deepest + 1);
        for layer in &self.layers[..=deepest] {
            let prev = outputs.last().unwrap_or(&input);
            let (out, idx) = match &layer.kind {
                LayerKind::Conv(conv) => (kernels::conv2d(prev, conv, relu), None),
                LayerKind::Pool => match self.pooling {
                    PoolMode::Average => (kernels::avg_pool(prev), None),
                    PoolMode::Max => {
                        let (o, i) = kernels::max_pool(prev);
                        (o, Some(i))
                    }
                },
            };
            outputs.push(out);
            argmax.push(idx);
        }
        Ok(ActivationTrace {
            input_shape: (c, h, w),
            statistics: self.statistics.clone(),
            outputs,
            argmax,
        })
    }

    /// Pulls per-statistics-layer cotangents back to dLoss/dx.
    pub fn backward(&self, trace: &ActivationTrace, cotangents: &[Tensor]) -> Result<Tensor> {
        if cotangents.len() != self.statistics.len() || trace.statistics != self.statistics {
            return Err(Error::Shape(format!(
                "{} cotangents for {} statistics layers",
                cotangents.len(),
                self.statistics.len()
            )));
        }
        for (k, (cot, &li)) in cotangents.iter().zip(&self.statistics).enumerate() {
            if cot.shape() != trace.outputs[li].shape() {
                return Err(Error::Shape(format!(
                    "cotangent {k} is {:?}, layer {} is {:?}",
                    cot.shape(),
                    self.layers[li].name,
                    trace.outputs[li].shape()
                )));
            }
        }
        let relu = self.activation == Activation::Relu;
        let mut grad: Option<Tensor> = None;
        let mut next_stat = self.statistics.len();
        for li in (0..trace.outputs.len()).rev() {
            if next_stat > 0 && self.statistics[next_stat - 1] == li {
                next_stat -= 1;
                let cot = &cotangents[next_stat];
                grad = Some(match grad {
                    None => cot.clone(),
                    Some(mut g) => {
                        g.data_mut()
                            .iter_mut()
                            .zip(cot.data())
                            .for_each(|(a, b)| *a += b);
                        g
                    }
                });
            }
            let Some(mut g) = grad.take() else { continue };
            let (_, in_h, in_w) = if li == 0 {
                trace.input_shape
            } else {
                trace.outputs[li - 1].shape()
            };
            g = match &self.layers[li].kind {
                LayerKind::Conv(conv) => {
                    if relu {
                        let out = &trace.outputs[li];
                        g.data_mut()
                            .iter_mut()
                            .zip(out.data())
                            .for_each(|(gv, &o)| {
                                if o <= 0.0 {
                                    *gv = 0.0;
                                }
                            });
                    }
                    kernels::conv2d_backward_input(&g, conv)
                }
                LayerKind::Pool => match &trace.argmax[li] {
                    None => kernels::avg_pool_backward(&g, in_h, in_w),
                    Some(idx) => kernels::max_pool_backward(&g, idx, in_h, in_w),
                },
            };
            grad = Some(g);
        }
        let (c, h, w) = trace.input_shape;
        Ok(grad.unwrap_or_else(|| Tensor::zeros(c, h, w)))
    }

    pub fn propagate_mask(&self, m: &Tensor, expansions: &[usize]) -> Result<MaskPyramid> {
        mask::propagate_mask(self, m, expansions)
    }

    pub fn exact_mask(&self, m: &Tensor) -> Result<MaskPyramid> {
        mask::exact_mask(self, m)
    }

    pub fn load_weights(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        weights::decode(&bytes)
    }

    pub fn write_weights(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, weights::encode(self))?;
        Ok(())
    }

    pub fn decode_weights(bytes: &[u8]) -> Result<Self> {
        weights::decode(bytes)
    }

    pub fn encode_weights(&self) -> Vec<u8> {
        weights::encode(self)
    }
}

/// Activations of one forward pass.
#[derive(Clone, Debug)]
pub struct ActivationTrace {
    input_shape: (usize, usize, usize),
    statistics: Vec<usize>,
    /// Output of every layer up to the deepest statistics layer.
    outputs: Vec<Tensor>,
    argmax: Vec<Option<Vec<u32>>>,
}

impl ActivationTrace {
    /// Captured feature tensor F^l of the k-th statistics layer.
    pub fn feature(&self, k: usize) -> &Tensor {
        &self.outputs[self.statistics[k]]
    }

    pub fn features(&self) -> impl Iterator<Item = &Tensor> {
        self.statistics.iter().map(|&i| &self.outputs[i])
    }

    pub fn num_statistics(&self) -> usize {
        self.statistics.len()
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    /// Drops intermediate tensors, keeping only the captured features.
    pub fn into_features(self) -> Vec<Tensor> {
        let mut outputs: Vec<Option<Tensor>> = self.outputs.into_iter().map(Some).collect();
        self.statistics
            .iter()
            .map(|&i| outputs[i].take().expect("distinct indices"))
            .collect()
    }
}
