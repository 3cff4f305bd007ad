//! Training objective: pixel loss, feature (perceptual) loss through a fixed
//! convolutional feature extractor, and total variation, combined with
//! non-negative weights.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::TensorFile;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_p: f64,
    pub lambda_f: f64,
    pub lambda_tv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_p: 1.0,
            lambda_f: 1.0,
            lambda_tv: 1e-5,
        }
    }
}

impl LossWeights {
    pub fn new(lambda_p: f64, lambda_f: f64, lambda_tv: f64) -> Result<Self> {
        let w = LossWeights {
            lambda_p,
            lambda_f,
            lambda_tv,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_p", self.lambda_p),
            ("lambda_f", self.lambda_f),
            ("lambda_tv", self.lambda_tv),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!(
                    "loss weight {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Layer widths of the default extractor: the first four convolutions of
/// VGG-16 with a 2x2 max-pool after the second (output of relu2_2).
const STACK: [(usize, usize); 4] = [(3, 64), (64, 64), (64, 128), (128, 128)];

/// Seed of the built-in extractor when no pretrained weights are supplied.
pub const DEFAULT_EXTRACTOR_SEED: u64 = 0x005e_edf1;

/// Fixed, non-trainable feature transform used by the feature loss.
#[derive(Clone, Debug)]
pub enum FeatureExtractor<T = f32> {
    /// Features are the image itself.
    Identity,
    Conv(ConvStack<T>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvStack<T = f32> {
    /// Per-channel value subtracted from the input before the first convolution.
    pub input_mean: Tensor<T>,
    /// `(weight, bias)` of conv1..conv4.
    pub convs: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Real> ConvStack<T> {
    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let convs = STACK
            .iter()
            .map(|&(cin, cout)| {
                let bound = (6.0 / (cin * 9) as f64).sqrt();
                let w = Tensor::from_fn(&[cout, cin, 3, 3], |_| T::from_f64_lossy(rng.gen_range(-bound..bound)));
                (w, Tensor::zeros(&[cout]))
            })
            .collect();
        ConvStack {
            input_mean: Tensor::zeros(&[3]),
            convs,
        }
    }

    pub fn tensor_names() -> Vec<(String, Vec<usize>)> {
        let mut names = Vec::new();
        for (i, &(cin, cout)) in STACK.iter().enumerate() {
            names.push((format!("phi.conv{}.weight", i + 1), vec![cout, cin, 3, 3]));
            names.push((format!("phi.conv{}.bias", i + 1), vec![cout]));
        }
        names
    }
}

impl ConvStack<f32> {
    /// Reads `phi.conv{1..4}.{weight,bias}` and the optional `phi.mean`.
    pub fn from_tensor_file(file: &TensorFile) -> Result<Self> {
        let mut tensors = Vec::new();
        for (name, shape) in Self::tensor_names() {
            tensors.push(file.expect(&name, &shape)?.clone());
        }
        let convs = tensors.chunks(2).map(|p| (p[0].clone(), p[1].clone())).collect();
        let input_mean = match file.tensors.get("phi.mean") {
            Some(_) => file.expect("phi.mean", &[3])?.clone(),
            None => Tensor::zeros(&[3]),
        };
        Ok(ConvStack { input_mean, convs })
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        let mut file = TensorFile::default();
        for ((name, _), t) in Self::tensor_names()
            .into_iter()
            .zip(self.convs.iter().flat_map(|(w, b)| [w, b]))
        {
            file.tensors.insert(name, t.clone());
        }
        file.tensors.insert("phi.mean".into(), self.input_mean.clone());
        file
    }
}

impl<T: Real> FeatureExtractor<T> {
    /// Randomly initialized stand-in with the relu2_2 topology.
    pub fn seeded(seed: u64) -> Self {
        FeatureExtractor::Conv(ConvStack::seeded(seed))
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (_, c, _, _) = g.value(x).dims4("feature_loss")?;
        if c != 3 {
            return Err(Error::shape(
                "feature_loss",
                "channels",
                format!("feature extractor expects 3-channel images, got {c}"),
            ));
        }
        let stack = match self {
            FeatureExtractor::Identity => return Ok(x),
            FeatureExtractor::Conv(stack) => stack,
        };
        let shift = stack.input_mean.data().iter().map(|&m| -m).collect();
        let mut h = g.channel_affine(x, vec![T::one(); 3], shift)?;
        for (i, (w, b)) in stack.convs.iter().enumerate() {
            let w = g.constant(w.clone());
            let b = g.constant(b.clone());
            h = g.conv2d(h, w, b, 1, 1)?;
            h = g.relu(h);
            if i == 1 {
                h = g.max_pool2(h)?;
            }
        }
        Ok(h)
    }

    /// Features of a batch without recording gradients.
    pub fn features(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let v = g.constant(x.clone());
        let f = self.forward(&mut g, v)?;
        Ok(g.value(f).clone())
    }

    pub fn cast<U: Real>(&self) -> FeatureExtractor<U> {
        match self {
            FeatureExtractor::Identity => FeatureExtractor::Identity,
            FeatureExtractor::Conv(s) => FeatureExtractor::Conv(ConvStack {
                input_mean: s.input_mean.cast(),
                convs: s.convs.iter().map(|(w, b)| (w.cast(), b.cast())).collect(),
            }),
        }
    }
}

impl FeatureExtractor<f32> {
    /// Loads externally converted extractor weights from a `CSIW` file.
    pub fn load(path: &Path) -> Result<Self> {
        Ok(FeatureExtractor::Conv(ConvStack::from_tensor_file(&TensorFile::load(
            path,
        )?)?))
    }
}

/// Mean squared error between target and prediction.
pub fn pixel_loss<T: Real>(g: &mut Graph<T>, target: Var, prediction: Var) -> Result<Var> {
    g.mean_squared_error(target, prediction)
}

/// Mean squared error between the extractor features of target and prediction.
pub fn feature_loss<T: Real>(g: &mut Graph<T>, target: Var, prediction: Var, phi: &FeatureExtractor<T>) -> Result<Var> {
    let ft = phi.forward(g, target)?;
    let fy = phi.forward(g, prediction)?;
    g.mean_squared_error(ft, fy)
}

/// Isotropic total variation of the prediction, summed over batch and channels.
pub fn tv_loss<T: Real>(g: &mut Graph<T>, prediction: Var) -> Result<Var> {
    g.total_variation(prediction)
}

/// Components of one evaluation of the weighted objective.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub pixel: Var,
    /// Skipped when its weight is zero.
    pub feature: Option<Var>,
    pub tv: Var,
}

pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    target: Var,
    prediction: Var,
    phi: &FeatureExtractor<T>,
    weights: &LossWeights,
) -> Result<LossTerms> {
    weights.validate()?;
    let pixel = pixel_loss(g, target, prediction)?;
    let feature = if weights.lambda_f > 0.0 {
        Some(feature_loss(g, target, prediction, phi)?)
    } else {
        None
    };
    let tv = tv_loss(g, prediction)?;
    let mut terms = vec![
        (pixel, T::from_f64_lossy(weights.lambda_p)),
        (tv, T::from_f64_lossy(weights.lambda_tv)),
    ];
    if let Some(f) = feature {
        terms.insert(1, (f, T::from_f64_lossy(weights.lambda_f)));
    }
    let total = g.weighted_sum(&terms)?;
    Ok(LossTerms {
        total,
        pixel,
        feature,
        tv,
    })
}
