use super::graph::BatchStats as Stats;
use super::{Graph, Mode, Parameter, Real, Tensor, Var};
use crate::error::{Error, Result};

pub use super::graph::BatchStats;

pub const DEFAULT_DECAY: f64 = 0.9;
pub const DEFAULT_EPS: f64 = 1e-5;

/// Learned affine and running statistics of one batch-normalization layer.
#[derive(Clone, Debug)]
pub struct BatchNormState<T = f32> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub decay: f64,
    pub eps: f64,
}

impl<T: Real> BatchNormState<T> {
    /// gamma = 1, beta = 0, running mean 0 and variance 1.
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: Parameter::new(Tensor::full(&[channels], T::one())),
            beta: Parameter::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            decay: DEFAULT_DECAY,
            eps: DEFAULT_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// Records the normalization on `g`. In training mode the batch
    /// statistics are returned so the caller can fold them into the running
    /// averages with [`BatchNormState::update_running`].
    pub fn forward(&self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<(Var, Option<Stats<T>>)> {
        let c = g.value(x).dims4("batch_norm")?.1;
        if c != self.channels() {
            return Err(Error::shape(
                "batch_norm",
                "channels",
                format!("input has {c} channels, state has {}", self.channels()),
            ));
        }
        match mode {
            Mode::Train => {
                let gamma = g.param(&self.gamma);
                let beta = g.param(&self.beta);
                let (y, stats) = g.batch_norm_train(x, gamma, beta, self.eps)?;
                Ok((y, Some(stats)))
            }
            Mode::Infer => {
                let eps = T::from_f64_lossy(self.eps);
                let (scale, shift) = self
                    .gamma
                    .value
                    .data()
                    .iter()
                    .zip(self.beta.value.data())
                    .zip(self.running_mean.data().iter().zip(self.running_var.data()))
                    .map(|((&gm, &bt), (&mu, &var))| {
                        let s = gm / (var + eps).sqrt();
                        (s, bt - s * mu)
                    })
                    .unzip();
                Ok((g.channel_affine(x, scale, shift)?, None))
            }
        }
    }

    /// `running <- decay * running + (1 - decay) * batch`, using the unbiased
    /// batch variance for the running variance.
    pub fn update_running(&mut self, stats: &Stats<T>) {
        let decay = T::from_f64_lossy(self.decay);
        let keep = T::one() - decay;
        let m = stats.count as f64;
        let adjust = T::from_f64_lossy(m / (m - 1.0).max(1.0));
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = decay * *r + keep * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = decay * *r + keep * adjust * b;
        }
    }

    pub fn cast<U: Real>(&self) -> BatchNormState<U> {
        BatchNormState {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            running_mean: self.running_mean.cast(),
            running_var: self.running_var.cast(),
            decay: self.decay,
            eps: self.eps,
        }
    }
}

/// Batch normalization that also updates the running statistics in
/// training mode.
pub fn batch_norm<T: Real>(g: &mut Graph<T>, x: Var, state: &mut BatchNormState<T>, mode: Mode) -> Result<Var> {
    let (y, stats) = state.forward(g, x, mode)?;
    if let Some(stats) = stats {
        state.update_running(&stats);
    }
    Ok(y)
}
