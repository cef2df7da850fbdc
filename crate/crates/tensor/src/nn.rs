//! Parameterized layers. Layers hold parameter ids only; values live in a
//! [`ParamStore`] and are looked up through a [`Bound`] at forward time.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::param::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// He-normal with the given gain multiplier.
    He(f64),
    Zeros,
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// `k x k` convolution with "same" padding at stride 1.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        rng: &mut R,
    ) -> Self {
        Self::with(store, name, cin, cout, k, 1, k / 2, Init::He(1.0), rng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let shape = [cout, cin, k, k];
        let w = match init {
            Init::He(gain) => {
                let std = gain * (2.0 / (cin * k * k) as f64).sqrt();
                Tensor::randn(&shape, T::lit(std), rng)
            }
            Init::Zeros => Tensor::zeros(&shape),
        };
        let weight = store.add(format!("{name}.weight"), w);
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p.var(self.weight), self.bias.map(|b| p.var(b)), self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        din: usize,
        dout: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = match init {
            Init::He(gain) => Tensor::randn(&[dout, din], T::lit(gain * (2.0 / din as f64).sqrt()), rng),
            Init::Zeros => Tensor::zeros(&[dout, din]),
        };
        Self {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dout])),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p.var(self.weight), Some(p.var(self.bias)))
    }
}

/// Group normalization with a learned per-channel affine.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub groups: usize,
    pub scale: ParamId,
    pub shift: ParamId,
}

impl GroupNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, groups: usize) -> Self {
        let groups = largest_divisor_at_most(channels, groups);
        Self {
            groups,
            scale: store.add(format!("{name}.scale"), Tensor::full(&[channels], T::one())),
            shift: store.add(format!("{name}.shift"), Tensor::zeros(&[channels])),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.group_norm(x, self.groups, 1e-5)?;
        g.channel_affine(y, p.var(self.scale), p.var(self.shift))
    }
}

fn largest_divisor_at_most(n: usize, k: usize) -> usize {
    (1..=k.min(n).max(1)).rev().find(|d| n.is_multiple_of(*d)).unwrap_or(1)
}
