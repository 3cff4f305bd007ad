use std::collections::HashMap;

use super::conv::{self, ConvGrads, Geometry};
use super::{ParamId, Parameter, Real, Tensor};
use crate::error::{Error, Result};

/// Batch-norm and dropout-style behaviour switch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const TV_SMOOTHING: f64 = 1e-8;

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Var,
        geom: Geometry,
    },
    Deconv {
        z: Var,
        w: Var,
        b: Var,
        geom: Geometry,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    ChannelAffine {
        x: Var,
        scale: Vec<T>,
    },
    Relu {
        x: Var,
    },
    Tanh {
        x: Var,
    },
    Affine {
        x: Var,
        scale: T,
    },
    Add {
        a: Var,
        b: Var,
    },
    MeanSquaredError {
        a: Var,
        b: Var,
    },
    TotalVariation {
        x: Var,
    },
    WeightedSum {
        terms: Vec<(Var, T)>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-channel statistics of one training-mode batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance used for normalization.
    pub var: Vec<T>,
    /// Number of values reduced per channel.
    pub count: usize,
}

/// A single-use tape. Build the forward pass with the op methods, call
/// [`Graph::backward`] once on a scalar, then read leaf gradients.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, Var>,
    track_params: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            track_params: true,
        }
    }

    /// A graph whose parameters enter as constants; nothing requires grad.
    pub fn inference() -> Self {
        Graph {
            track_params: false,
            ..Self::new()
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is wanted but that is not a [`Parameter`].
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a parameter leaf. Binding the same parameter twice reuses the
    /// first leaf so its gradient accumulates across uses.
    pub fn param(&mut self, p: &Parameter<T>) -> Var {
        if !self.track_params {
            return self.constant(p.value.clone());
        }
        if let Some(&v) = self.params.get(&p.id()) {
            return v;
        }
        let v = self.variable(p.value.clone());
        self.params.insert(p.id(), v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v).item()
    }

    /// Gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param_grad(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|&v| self.grad(v))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = conv::conv_geometry(self.value(x), self.value(w), self.value(b), stride, pad)?;
        let out = conv::conv_forward(self.value(x), self.value(w), self.value(b), &geom);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, Op::Conv { x, w, b, geom }, rg))
    }

    pub fn deconv2d(
        &mut self,
        z: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        out_size: (usize, usize),
    ) -> Result<Var> {
        let geom = conv::deconv_geometry(self.value(z), self.value(w), self.value(b), stride, pad, out_size)?;
        let out = conv::deconv_forward(self.value(z), self.value(w), self.value(b), &geom);
        let rg = self.rg(z) || self.rg(w) || self.rg(b);
        Ok(self.push(out, Op::Deconv { z, w, b, geom }, rg))
    }

    /// 2x2 max pooling with stride 2; spatial extents must be even.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("max_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("max_pool2", "spatial", format!("{h}x{w} is not even")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::new(vec![n, c, oh, ow], out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::MaxPool2 { x, argmax }, rg))
    }

    /// Training-mode batch normalization over (N, H, W) per channel.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats<T>)> {
        const OP: &str = "batch_norm";
        let (n, c, h, w) = self.value(x).dims4(OP)?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(Error::shape(
                    OP,
                    "channels",
                    format!("{name} has shape {:?}, input has {c} channels", self.value(v).shape()),
                ));
            }
        }
        let plane = h * w;
        let count = n * plane;
        let src = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut acc = 0.0f64;
            for img in 0..n {
                let off = (img * c + ch) * plane;
                acc += src[off..off + plane].iter().map(|v| v.as_f64()).sum::<f64>();
            }
            let mu = acc / count as f64;
            let mut sq = 0.0f64;
            for img in 0..n {
                let off = (img * c + ch) * plane;
                sq += src[off..off + plane]
                    .iter()
                    .map(|v| {
                        let d = v.as_f64() - mu;
                        d * d
                    })
                    .sum::<f64>();
            }
            mean[ch] = T::from_f64_lossy(mu);
            var[ch] = T::from_f64_lossy(sq / count as f64);
        }
        let eps = T::from_f64_lossy(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        for (i, (xh, o)) in xhat.iter_mut().zip(out.iter_mut()).enumerate() {
            let ch = (i / plane) % c;
            *xh = (src[i] - mean[ch]) * inv_std[ch];
            *o = g[ch] * *xh + b[ch];
        }
        let out = Tensor::new(vec![n, c, h, w], out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        );
        Ok((v, BatchStats { mean, var, count }))
    }

    /// `y[c] = scale[c] * x[c] + shift[c]` with constant per-channel coefficients.
    pub fn channel_affine(&mut self, x: Var, scale: Vec<T>, shift: Vec<T>) -> Result<Var> {
        let (_, c, h, w) = self.value(x).dims4("channel_affine")?;
        if scale.len() != c || shift.len() != c {
            return Err(Error::shape(
                "channel_affine",
                "channels",
                format!("{c} channels vs {} coefficients", scale.len()),
            ));
        }
        let plane = h * w;
        let mut out = self.value(x).clone();
        for (i, p) in out.data_mut().chunks_mut(plane).enumerate() {
            let ch = i % c;
            p.iter_mut().for_each(|v| *v = scale[ch] * *v + shift[ch]);
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::ChannelAffine { x, scale }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(out, Op::Relu { x }, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        let rg = self.rg(x);
        self.push(out, Op::Tanh { x }, rg)
    }

    /// Elementwise `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        let rg = self.rg(x);
        self.push(out, Op::Affine { x, scale }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                "add",
                "shape",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    /// Mean over all elements of `(a - b)^2`.
    pub fn mean_squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(
                "mean_squared_error",
                "shape",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let sum: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| {
                let d = x.as_f64() - y.as_f64();
                d * d
            })
            .sum();
        let out = Tensor::scalar(T::from_f64_lossy(sum / ta.len() as f64));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MeanSquaredError { a, b }, rg))
    }

    /// Isotropic total variation: sum over every pixel that has both a lower
    /// and a right neighbour of the forward-difference gradient magnitude.
    pub fn total_variation(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("total_variation")?;
        if h < 2 || w < 2 {
            return Err(Error::shape(
                "total_variation",
                "spatial",
                format!("{h}x{w} has no interior pairs"),
            ));
        }
        let src = self.value(x).data();
        let mut sum = 0.0f64;
        for plane in src.chunks(h * w).take(n * c) {
            for i in 0..h - 1 {
                for j in 0..w - 1 {
                    let here = plane[i * w + j].as_f64();
                    let dv = plane[(i + 1) * w + j].as_f64() - here;
                    let dh = plane[i * w + j + 1].as_f64() - here;
                    sum += (dv * dv + dh * dh).sqrt();
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(T::from_f64_lossy(sum)), Op::TotalVariation { x }, rg))
    }

    /// `sum_i weight_i * term_i` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut acc = T::zero();
        for &(v, w) in terms {
            let t = self.value(v);
            if !t.is_scalar() {
                return Err(Error::shape(
                    "weighted_sum",
                    "rank",
                    format!("term has shape {:?}", t.shape()),
                ));
            }
            acc += w * t.item();
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        Ok(self.push(Tensor::scalar(acc), Op::WeightedSum { terms: terms.to_vec() }, rg))
    }

    /// Reverse-mode sweep from a scalar output. Gradients are retained for
    /// leaves only.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if !self.value(output).is_scalar() {
            return Err(Error::shape(
                "backward",
                "output",
                format!("expected a scalar, got shape {:?}", self.value(output).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.value(output).shape(), T::one()));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &dy, &mut grads);
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                *g = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, node: &Node<T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let mut send = |v: Var, g: Tensor<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let need = (self.rg(*x), self.rg(*w), self.rg(*b));
                let ConvGrads { input, weight, bias } =
                    conv::conv_backward(self.value(*x), self.value(*w), dy, geom, need);
                if let Some(g) = input {
                    send(*x, g);
                }
                if let Some(g) = weight {
                    send(*w, g);
                }
                if let Some(g) = bias {
                    send(*b, g);
                }
            }
            Op::Deconv { z, w, b, geom } => {
                let need = (self.rg(*z), self.rg(*w), self.rg(*b));
                let ConvGrads { input, weight, bias } =
                    conv::deconv_backward(self.value(*z), self.value(*w), dy, geom, need);
                if let Some(g) = input {
                    send(*z, g);
                }
                if let Some(g) = weight {
                    send(*w, g);
                }
                if let Some(g) = bias {
                    send(*b, g);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                for (&src, &g) in argmax.iter().zip(dy.data()) {
                    dx.data_mut()[src] += g;
                }
                send(*x, dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let shape = self.value(*x).shape().to_vec();
                let (c, plane) = (shape[1], shape[2] * shape[3]);
                let count = T::from_usize(xhat.len() / c).expect("count");
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (i, (p, xh)) in dy.data().chunks(plane).zip(xhat.chunks(plane)).enumerate() {
                    let ch = i % c;
                    for (&g, &xv) in p.iter().zip(xh) {
                        dbeta[ch] += g;
                        dgamma[ch] += g * xv;
                    }
                }
                if self.rg(*x) {
                    // dx = gamma * inv_std / m * (m * dy - sum(dy) - xhat * sum(dy * xhat))
                    let mut dx = vec![T::zero(); xhat.len()];
                    for (i, ((o, &g), &xv)) in dx.iter_mut().zip(dy.data()).zip(xhat.iter()).enumerate() {
                        let ch = (i / plane) % c;
                        *o = gam[ch] * inv_std[ch] / count * (count * g - dbeta[ch] - xv * dgamma[ch]);
                    }
                    send(*x, Tensor::new(shape, dx).expect("shape"));
                }
                send(*gamma, Tensor::new(vec![c], dgamma).expect("shape"));
                send(*beta, Tensor::new(vec![c], dbeta).expect("shape"));
            }
            Op::ChannelAffine { x, scale } => {
                let s = self.value(*x).shape();
                let (c, plane) = (s[1], s[2] * s[3]);
                let mut dx = dy.clone();
                for (i, p) in dx.data_mut().chunks_mut(plane).enumerate() {
                    let k = scale[i % c];
                    p.iter_mut().for_each(|v| *v *= k);
                }
                send(*x, dx);
            }
            Op::Relu { x } => {
                let mut dx = dy.clone();
                for (g, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    if y <= T::zero() {
                        *g = T::zero();
                    }
                }
                send(*x, dx);
            }
            Op::Tanh { x } => {
                let mut dx = dy.clone();
                for (g, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    *g *= T::one() - y * y;
                }
                send(*x, dx);
            }
            Op::Affine { x, scale } => send(*x, dy.map(|g| g * *scale)),
            Op::Add { a, b } => {
                send(*a, dy.clone());
                send(*b, dy.clone());
            }
            Op::MeanSquaredError { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let k = dy.item() * T::from_f64_lossy(2.0 / ta.len() as f64);
                let da = Tensor::from_fn(ta.shape(), |i| k * (ta.data()[i] - tb.data()[i]));
                if self.rg(*b) {
                    send(*b, da.map(|v| -v));
                }
                send(*a, da);
            }
            Op::TotalVariation { x } => {
                let t = self.value(*x);
                let s = t.shape();
                let (h, w) = (s[2], s[3]);
                let g = dy.item();
                let eps = T::from_f64_lossy(TV_SMOOTHING);
                let mut dx = Tensor::zeros(s);
                for (src, dst) in t.data().chunks(h * w).zip(dx.data_mut().chunks_mut(h * w)) {
                    for i in 0..h - 1 {
                        for j in 0..w - 1 {
                            let here = src[i * w + j];
                            let dv = src[(i + 1) * w + j] - here;
                            let dh = src[i * w + j + 1] - here;
                            let r = (dv * dv + dh * dh + eps).sqrt();
                            let (gv, gh) = (g * dv / r, g * dh / r);
                            dst[(i + 1) * w + j] += gv;
                            dst[i * w + j + 1] += gh;
                            dst[i * w + j] -= gv + gh;
                        }
                    }
                }
                send(*x, dx);
            }
            Op::WeightedSum { terms } => {
                for &(v, w) in terms {
                    send(v, Tensor::full(&[1], dy.item() * w));
                }
            }
        }
    }
}
