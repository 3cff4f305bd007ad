//! The 11-layer sketch inversion network: three convolutions, five residual
//! blocks, two transposed convolutions and a final convolution, each
//! followed by batch normalization.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{BatchNormState, BatchStats, Graph, Mode, Parameter, Parameterized, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Residual,
    Deconv,
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerKind::Conv => "con.",
            LayerKind::Residual => "res.",
            LayerKind::Deconv => "dec.",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// tanh followed by the affine map onto [0, 255].
    ScaledTanh,
}

/// (kind, out_channels, ksize, stride, pad) per layer. Residual rows describe
/// both inner convolutions.
const LAYOUT: [(LayerKind, usize, usize, usize, usize); 11] = [
    (LayerKind::Conv, 32, 9, 1, 4),
    (LayerKind::Conv, 64, 3, 2, 1),
    (LayerKind::Conv, 128, 3, 2, 1),
    (LayerKind::Residual, 128, 3, 1, 1),
    (LayerKind::Residual, 128, 3, 1, 1),
    (LayerKind::Residual, 128, 3, 1, 1),
    (LayerKind::Residual, 128, 3, 1, 1),
    (LayerKind::Residual, 128, 3, 1, 1),
    (LayerKind::Deconv, 64, 3, 2, 1),
    (LayerKind::Deconv, 32, 3, 2, 1),
    (LayerKind::Conv, 3, 9, 1, 4),
];

pub const OUTPUT_CHANNELS: usize = 3;

/// Convolution (or transposed convolution) plus its batch normalization.
#[derive(Clone, Debug)]
pub struct ConvUnit<T = f32> {
    pub transposed: bool,
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
    pub stride: usize,
    pub pad: usize,
    pub bn: BatchNormState<T>,
}

impl<T: Real> ConvUnit<T> {
    fn new(
        transposed: bool,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let shape = if transposed {
            [cin, cout, k, k]
        } else {
            [cout, cin, k, k]
        };
        let bound = (6.0 / (cin * k * k) as f64).sqrt();
        let weight = Tensor::from_fn(&shape, |_| T::from_f64_lossy(rng.gen_range(-bound..bound)));
        ConvUnit {
            transposed,
            weight: Parameter::new(weight),
            bias: Parameter::new(Tensor::zeros(&[cout])),
            stride,
            pad,
            bn: BatchNormState::new(cout),
        }
    }

    pub fn in_channels(&self) -> usize {
        let s = self.weight.shape();
        if self.transposed {
            s[0]
        } else {
            s[1]
        }
    }

    pub fn out_channels(&self) -> usize {
        let s = self.weight.shape();
        if self.transposed {
            s[1]
        } else {
            s[0]
        }
    }

    pub fn ksize(&self) -> usize {
        self.weight.shape()[2]
    }

    fn forward(&self, g: &mut Graph<T>, x: Var, mode: Mode, stats: &mut Vec<BatchStats<T>>) -> Result<Var> {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        let y = if self.transposed {
            let (_, _, h, wd) = g.value(x).dims4("deconv2d")?;
            g.deconv2d(x, w, b, self.stride, self.pad, (h * self.stride, wd * self.stride))?
        } else {
            g.conv2d(x, w, b, self.stride, self.pad)?
        };
        let (y, s) = self.bn.forward(g, y, mode)?;
        stats.extend(s);
        Ok(y)
    }

    fn params(&self) -> [&Parameter<T>; 4] {
        [&self.weight, &self.bias, &self.bn.gamma, &self.bn.beta]
    }

    fn params_mut(&mut self) -> [&mut Parameter<T>; 4] {
        [&mut self.weight, &mut self.bias, &mut self.bn.gamma, &mut self.bn.beta]
    }

    fn cast<U: Real>(&self) -> ConvUnit<U> {
        ConvUnit {
            transposed: self.transposed,
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            stride: self.stride,
            pad: self.pad,
            bn: self.bn.cast(),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Layer<T = f32> {
    Single {
        unit: ConvUnit<T>,
        activation: Activation,
    },
    /// conv-BN-ReLU-conv-BN, summed with the block input, no activation after the sum.
    Residual {
        first: ConvUnit<T>,
        second: ConvUnit<T>,
    },
}

impl<T: Real> Layer<T> {
    pub fn units(&self) -> Vec<&ConvUnit<T>> {
        match self {
            Layer::Single { unit, .. } => vec![unit],
            Layer::Residual { first, second } => vec![first, second],
        }
    }

    fn units_mut(&mut self) -> Vec<&mut ConvUnit<T>> {
        match self {
            Layer::Single { unit, .. } => vec![unit],
            Layer::Residual { first, second } => vec![first, second],
        }
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Single { unit, .. } if unit.transposed => LayerKind::Deconv,
            Layer::Single { .. } => LayerKind::Conv,
            Layer::Residual { .. } => LayerKind::Residual,
        }
    }
}

/// One row of the architecture audit. Residual rows carry two entries per
/// column (first / second convolution).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub index: usize,
    pub kind: LayerKind,
    pub in_channels: Vec<usize>,
    pub out_channels: Vec<usize>,
    pub ksize: Vec<usize>,
    pub stride: Vec<usize>,
    pub pad: Vec<usize>,
    pub normalization: String,
    pub activation: String,
}

/// Result of a forward pass.
pub struct NetOutput<T> {
    /// Images in [0, 255], `N x 3 x H x W`.
    pub output: Var,
    /// Activation after each of the 11 layers.
    pub layers: Vec<Var>,
    /// Batch statistics of every normalization, in network order (train mode only).
    pub stats: Vec<BatchStats<T>>,
}

#[derive(Clone, Debug)]
pub struct CsiNetwork<T = f32> {
    in_channels: usize,
    layers: Vec<Layer<T>>,
}

impl<T: Real> CsiNetwork<T> {
    /// He-uniform kernels, zero biases, identity batch norms, all drawn from `seed`.
    pub fn build(in_channels: usize, seed: u64) -> Result<Self> {
        if in_channels != 1 && in_channels != 3 {
            return Err(Error::invalid(format!(
                "the network accepts 1- or 3-channel sketches, got {in_channels}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = in_channels;
        let layers = LAYOUT
            .iter()
            .map(|&(kind, cout, k, s, p)| {
                let layer = match kind {
                    LayerKind::Conv | LayerKind::Deconv => Layer::Single {
                        unit: ConvUnit::new(kind == LayerKind::Deconv, cin, cout, k, s, p, &mut rng),
                        activation: if cout == OUTPUT_CHANNELS {
                            Activation::ScaledTanh
                        } else {
                            Activation::Relu
                        },
                    },
                    LayerKind::Residual => Layer::Residual {
                        first: ConvUnit::new(false, cin, cout, k, s, p, &mut rng),
                        second: ConvUnit::new(false, cout, cout, k, s, p, &mut rng),
                    },
                };
                cin = cout;
                layer
            })
            .collect();
        Ok(CsiNetwork { in_channels, layers })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn units(&self) -> impl Iterator<Item = &ConvUnit<T>> {
        self.layers.iter().flat_map(|l| l.units())
    }

    pub fn units_mut(&mut self) -> impl Iterator<Item = &mut ConvUnit<T>> {
        self.layers.iter_mut().flat_map(|l| l.units_mut())
    }

    /// Checks that a batch can pass through the network. Spatial extents must
    /// be multiples of 4 so the two stride-2 stages invert exactly.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let &[_, c, h, w] = shape else {
            return Err(Error::shape("forward", "rank", format!("expected NCHW, got {shape:?}")));
        };
        if c != self.in_channels {
            return Err(Error::shape(
                "forward",
                "channels",
                format!("network expects {} input channels, got {c}", self.in_channels),
            ));
        }
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(Error::shape(
                "forward",
                "spatial",
                format!("{h}x{w} is not a multiple of 4"),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph<T>, input: Var, mode: Mode) -> Result<NetOutput<T>> {
        self.check_input(g.value(input).shape())?;
        let mut stats = Vec::new();
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut x = input;
        for layer in &self.layers {
            x = match layer {
                Layer::Single { unit, activation } => {
                    let y = unit.forward(g, x, mode, &mut stats)?;
                    match activation {
                        Activation::Relu => g.relu(y),
                        Activation::ScaledTanh => {
                            let t = g.tanh(y);
                            let half = T::from_f64_lossy(127.5);
                            g.affine(t, half, half)
                        }
                    }
                }
                Layer::Residual { first, second } => {
                    let h = first.forward(g, x, mode, &mut stats)?;
                    let h = g.relu(h);
                    let h = second.forward(g, h, mode, &mut stats)?;
                    g.add(x, h)?
                }
            };
            layers.push(x);
        }
        Ok(NetOutput {
            output: x,
            layers,
            stats,
        })
    }

    /// Folds training-mode batch statistics into the running averages.
    pub fn apply_batch_stats(&mut self, stats: &[BatchStats<T>]) -> Result<()> {
        let units: Vec<_> = self.units_mut().collect();
        if units.len() != stats.len() {
            return Err(Error::invalid(format!(
                "{} batch statistics for {} normalization layers",
                stats.len(),
                units.len()
            )));
        }
        for (unit, s) in units.into_iter().zip(stats) {
            unit.bn.update_running(s);
        }
        Ok(())
    }

    /// Inference-mode forward pass on a batch.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let x = g.constant(input.clone());
        let out = self.forward(&mut g, x, Mode::Infer)?;
        Ok(g.value(out.output).clone())
    }

    /// Inference-mode activations of every layer for one batch.
    pub fn layer_activations(&self, input: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::inference();
        let x = g.constant(input.clone());
        let out = self.forward(&mut g, x, Mode::Infer)?;
        Ok(out.layers.iter().map(|&v| g.value(v).clone()).collect())
    }

    /// Describes the built network row by row, read back from the actual
    /// parameter shapes and layer settings.
    pub fn audit(&self) -> Vec<LayerSpec> {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, layer)| {
                let units = layer.units();
                let activation = match layer {
                    Layer::Single {
                        activation: Activation::Relu,
                        ..
                    } => "ReLU".to_string(),
                    Layer::Single {
                        activation: Activation::ScaledTanh,
                        ..
                    } => "tanh".to_string(),
                    Layer::Residual { .. } => "ReLU/+x".to_string(),
                };
                LayerSpec {
                    index: i + 1,
                    kind: layer.kind(),
                    in_channels: units.iter().map(|u| u.in_channels()).collect(),
                    out_channels: units.iter().map(|u| u.out_channels()).collect(),
                    ksize: units.iter().map(|u| u.ksize()).collect(),
                    stride: units.iter().map(|u| u.stride).collect(),
                    pad: units.iter().map(|u| u.pad).collect(),
                    normalization: vec!["BN"; units.len()].join("/"),
                    activation,
                }
            })
            .collect()
    }

    pub fn cast<U: Real>(&self) -> CsiNetwork<U> {
        CsiNetwork {
            in_channels: self.in_channels,
            layers: self
                .layers
                .iter()
                .map(|l| match l {
                    Layer::Single { unit, activation } => Layer::Single {
                        unit: unit.cast(),
                        activation: *activation,
                    },
                    Layer::Residual { first, second } => Layer::Residual {
                        first: first.cast(),
                        second: second.cast(),
                    },
                })
                .collect(),
        }
    }

    /// Stable tensor-name prefixes of every unit: `(conv prefix, bn prefix)`.
    pub fn unit_names(&self) -> Vec<(String, String)> {
        let mut names = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let base = format!("layer{:02}", i + 1);
            match layer {
                Layer::Single { unit, .. } => {
                    let conv = if unit.transposed { "deconv" } else { "conv" };
                    names.push((format!("{base}.{conv}"), format!("{base}.bn")));
                }
                Layer::Residual { .. } => {
                    names.push((format!("{base}.conv1"), format!("{base}.bn1")));
                    names.push((format!("{base}.conv2"), format!("{base}.bn2")));
                }
            }
        }
        names
    }

    /// Names matching [`Parameterized::parameters`] order.
    pub fn parameter_names(&self) -> Vec<String> {
        self.unit_names()
            .into_iter()
            .flat_map(|(conv, bn)| {
                [
                    format!("{conv}.weight"),
                    format!("{conv}.bias"),
                    format!("{bn}.gamma"),
                    format!("{bn}.beta"),
                ]
            })
            .collect()
    }
}

impl<T: Real> Parameterized<T> for CsiNetwork<T> {
    fn parameters(&self) -> Vec<&Parameter<T>> {
        self.units().flat_map(|u| u.params()).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.units_mut().flat_map(|u| u.params_mut()).collect()
    }
}
