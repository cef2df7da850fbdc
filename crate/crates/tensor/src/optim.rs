use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers follow the store's order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(TensorError::Shape(format!(
                "adam: {} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bias1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let bias2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let lr = T::lit(c.learning_rate);
        let eps = T::lit(c.eps);
        let one = T::one();
        for (((_, param), g), (m, v)) in store
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            param.expect_same_shape(g)?;
            let p = param.data_mut();
            for (i, &gi) in g.data().iter().enumerate() {
                let mi = &mut m.data_mut()[i];
                *mi = b1 * *mi + (one - b1) * gi;
                let vi = &mut v.data_mut()[i];
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let m_hat = m.data()[i] / bias1;
                let v_hat = v.data()[i] / bias2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Moment buffers as `(name, tensor)` pairs for serialization.
    pub fn state_tensors(&self, store: &ParamStore<T>, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::with_capacity(2 * store.len());
        for ((name, _), (m, v)) in store.iter().zip(self.m.iter().zip(&self.v)) {
            out.push((format!("{prefix}m/{name}"), m.clone()));
            out.push((format!("{prefix}v/{name}"), v.clone()));
        }
        out
    }

    pub fn restore<'a>(
        store: &ParamStore<T>,
        config: AdamConfig,
        step: u64,
        prefix: &str,
        mut lookup: impl FnMut(&str) -> Option<&'a Tensor<T>>,
    ) -> Result<Self> {
        let mut m = Vec::with_capacity(store.len());
        let mut v = Vec::with_capacity(store.len());
        for (name, t) in store.iter() {
            for (kind, buf) in [("m", &mut m), ("v", &mut v)] {
                let key = format!("{prefix}{kind}/{name}");
                let src = lookup(&key).ok_or(TensorError::MissingTensor(key))?;
                src.expect_same_shape(t)?;
                buf.push(src.clone());
            }
        }
        Ok(Self { config, step, m, v })
    }
}
