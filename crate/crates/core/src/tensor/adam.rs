use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::{Graph, Real, Tensor};

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// Process-unique identity of a [`Parameter`], used to find its gradient in a
/// [`Graph`] after the backward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// A trainable tensor with its gradient and Adam moment estimates.
#[derive(Debug)]
pub struct Parameter<T = f32> {
    id: ParamId,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub step_count: u64,
}

impl<T: Clone> Clone for Parameter<T> {
    /// Clones get a fresh identity so two copies never alias inside a graph.
    fn clone(&self) -> Self {
        Parameter {
            id: ParamId::fresh(),
            value: self.value.clone(),
            grad: self.grad.clone(),
            m: self.m.clone(),
            v: self.v.clone(),
            step_count: self.step_count,
        }
    }
}

impl<T: Real> Parameter<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let shape = value.shape().to_vec();
        Parameter {
            id: ParamId::fresh(),
            value,
            grad: Tensor::zeros(&shape),
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
            step_count: 0,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    /// Adds this parameter's gradient from a finished backward pass.
    /// Returns false when the parameter did not take part in the graph.
    pub fn accumulate_grad(&mut self, graph: &Graph<T>) -> bool {
        match graph.param_grad(self.id) {
            Some(g) => {
                self.grad.add_assign(g);
                true
            }
            None => false,
        }
    }

    pub fn cast<U: Real>(&self) -> Parameter<U> {
        Parameter {
            id: ParamId::fresh(),
            value: self.value.cast(),
            grad: self.grad.cast(),
            m: self.m.cast(),
            v: self.v.cast(),
            step_count: self.step_count,
        }
    }
}

/// Anything that owns trainable parameters in a stable order.
pub trait Parameterized<T: Real> {
    fn parameters(&self) -> Vec<&Parameter<T>>;
    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>>;

    fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.numel()).sum()
    }

    fn zero_grads(&mut self) {
        self.parameters_mut().into_iter().for_each(Parameter::zero_grad);
    }

    fn accumulate_grads(&mut self, graph: &Graph<T>) {
        for p in self.parameters_mut() {
            p.accumulate_grad(graph);
        }
    }
}

impl<T: Real> Parameterized<T> for Vec<Parameter<T>> {
    fn parameters(&self) -> Vec<&Parameter<T>> {
        self.iter().collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.iter_mut().collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            alpha: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of every parameter. Gradients are left in
/// place; the caller clears them before the next accumulation.
pub fn adam_step<'a, T: Real>(params: impl IntoIterator<Item = &'a mut Parameter<T>>, config: &AdamConfig) {
    let b1 = T::from_f64_lossy(config.beta1);
    let b2 = T::from_f64_lossy(config.beta2);
    let eps = T::from_f64_lossy(config.epsilon);
    let one = T::one();
    for p in params {
        p.step_count += 1;
        let t = p.step_count as i32;
        let c1 = 1.0 - config.beta1.powi(t);
        let c2 = 1.0 - config.beta2.powi(t);
        let lr = T::from_f64_lossy(config.alpha);
        let inv_c1 = T::from_f64_lossy(1.0 / c1);
        let inv_c2 = T::from_f64_lossy(1.0 / c2);
        let Parameter { value, grad, m, v, .. } = p;
        for (((w, &g), m), v) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m * inv_c1;
            let v_hat = *v * inv_c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}
