//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its variables. Calling
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! for every node that transitively depends on a gradient-carrying leaf.
//! A fresh graph is built for every optimizer step.

use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeometry};
use crate::param::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
enum Unary<T> {
    Relu,
    LeakyRelu(T),
    Silu,
    Tanh,
    Sigmoid,
    Exp,
    Square,
    Abs,
    Scale(T),
    AddScalar(T),
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geo: ConvGeometry,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddPerChannel {
        x: Var,
        v: Var,
    },
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    Unary(Unary<T>, Var),
    Upsample2(Var),
    AvgPool2(Var),
    Concat(Vec<Var>),
    SliceChannels {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    BatchNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    GroupNorm {
        x: Var,
        groups: usize,
        inv_std: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    StraightThrough(Var),
    External {
        x: Var,
        grad: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by variable.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<V>(msg: String) -> Result<V> {
    Err(TensorError::Shape(msg))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A value that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A value whose gradient will be reported by [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers every parameter in `store` as a gradient-carrying leaf.
    pub fn bind(&mut self, store: &ParamStore<T>) -> Bound {
        let vars = store.iter().map(|(_, t)| self.leaf(t.clone())).collect();
        Bound::new(vars)
    }

    /// Registers every parameter in `store` as a constant (inference only).
    pub fn bind_frozen(&mut self, store: &ParamStore<T>) -> Bound {
        let vars = store
            .iter()
            .map(|(_, t)| self.constant(t.clone()))
            .collect();
        Bound::new(vars)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Copies the value of `v` into a new constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (o, ci, kh, kw) = self.value(w).dims4()?;
        if ci != c || kh != kw {
            return shape_err(format!(
                "conv2d: input {:?} incompatible with weight {:?}",
                self.value(x).shape(),
                self.value(w).shape()
            ));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw || stride == 0 {
            return shape_err(format!("conv2d: kernel {kh} does not fit input {h}x{wd}"));
        }
        if let Some(b) = b {
            if self.value(b).numel() != o {
                return shape_err(format!("conv2d: bias must have {o} entries"));
            }
        }
        let geo = ConvGeometry {
            batch: n,
            in_channels: c,
            out_channels: o,
            height: h,
            width: wd,
            kernel: kh,
            stride,
            pad,
        };
        let out = kernels::conv2d_forward(
            &geo,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(&[n, o, geo.out_height(), geo.out_width()], out)?;
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(value, Op::Conv2d { x, w, b, geo }, needs))
    }

    /// `x [N, in] * w[out, in]^T + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, din) = self.value(x).dims2()?;
        let (dout, win) = self.value(w).dims2()?;
        if din != win {
            return shape_err(format!("linear: input width {din} vs weight width {win}"));
        }
        let mut out = vec![T::zero(); n * dout];
        T::gemm(n, din, dout, self.value(x).data(), false, self.value(w).data(), true, &mut out, T::zero());
        if let Some(b) = b {
            let bias = self.value(b).data();
            if bias.len() != dout {
                return shape_err(format!("linear: bias must have {dout} entries"));
            }
            for row in out.chunks_exact_mut(dout) {
                for (v, &bb) in row.iter_mut().zip(bias) {
                    *v += bb;
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let value = Tensor::new(&[n, dout], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), needs))
    }

    /// Adds `v [N, C]` to every spatial position of `x [N, C, H, W]`.
    pub fn add_per_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(v).shape() != [n, c] {
            return shape_err(format!(
                "add_per_channel: expected [{n}, {c}], got {:?}",
                self.value(v).shape()
            ));
        }
        let mut value = self.value(x).clone();
        let offsets = self.value(v).data().to_vec();
        for (plane, &o) in value.data_mut().chunks_exact_mut(h * w).zip(&offsets) {
            for e in plane {
                *e += o;
            }
        }
        let needs = self.needs(x) || self.needs(v);
        Ok(self.push(value, Op::AddPerChannel { x, v }, needs))
    }

    /// `x * scale[c] + shift[c]` with per-channel `[C]` parameters.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (_, c, h, w) = self.value(x).dims4()?;
        if self.value(scale).numel() != c || self.value(shift).numel() != c {
            return shape_err(format!("channel_affine: parameters must have {c} entries"));
        }
        let s = self.value(scale).data().to_vec();
        let t = self.value(shift).data().to_vec();
        let mut value = self.value(x).clone();
        for (i, plane) in value.data_mut().chunks_exact_mut(h * w).enumerate() {
            let ch = i % c;
            for e in plane {
                *e = *e * s[ch] + t[ch];
            }
        }
        let needs = self.needs(x) || self.needs(scale) || self.needs(shift);
        Ok(self.push(value, Op::ChannelAffine { x, scale, shift }, needs))
    }

    fn unary(&mut self, kind: Unary<T>, x: Var) -> Var {
        let value = self.value(x).map(|v| apply_unary(kind, v));
        let needs = self.needs(x);
        self.push(value, Op::Unary(kind, x), needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(Unary::LeakyRelu(T::lit(slope)), x)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(Unary::Silu, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(Unary::Square, x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(Unary::Abs, x)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(Unary::Scale(T::lit(s)), x)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(Unary::AddScalar(T::lit(s)), x)
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let out = kernels::upsample2_forward(self.value(x).data(), n * c, h, w);
        let value = Tensor::new(&[n, c, 2 * h, 2 * w], out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Upsample2(x), needs))
    }

    /// 2x2 average pooling.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return shape_err(format!("avg_pool2: odd spatial size {h}x{w}"));
        }
        let out = kernels::avgpool2_forward(self.value(x).data(), n * c, h, w);
        let value = Tensor::new(&[n, c, h / 2, w / 2], out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::AvgPool2(x), needs))
    }

    /// Concatenation along the channel axis of rank-4 tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Shape("concat of zero tensors".into()))?;
        let (n, _, h, w) = self.value(*first).dims4()?;
        let mut channels = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return shape_err(format!(
                    "concat: {:?} incompatible with {:?}",
                    self.value(p).shape(),
                    self.value(*first).shape()
                ));
            }
            channels.push(pc);
        }
        let total: usize = channels.iter().sum();
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total * hw);
        for b in 0..n {
            for (&p, &pc) in parts.iter().zip(&channels) {
                let data = self.value(p).data();
                out.extend_from_slice(&data[b * pc * hw..(b + 1) * pc * hw]);
            }
        }
        let value = Tensor::new(&[n, total, h, w], out)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(value, Op::Concat(parts.to_vec()), needs))
    }

    /// Channels `start..start + len` of a rank-4 tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if start + len > c {
            return shape_err(format!("slice_channels: {start}+{len} exceeds {c} channels"));
        }
        let hw = h * w;
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(n * len * hw);
        for b in 0..n {
            out.extend_from_slice(&data[(b * c + start) * hw..(b * c + start + len) * hw]);
        }
        let value = Tensor::new(&[n, len, h, w], out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::SliceChannels { x, start }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape(x), needs))
    }

    /// Parameter-free batch normalization: per channel over `(N, H, W)`.
    pub fn batch_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let members = move |ch: usize| (0..n).map(|b| (b * c + ch) * hw..(b * c + ch + 1) * hw).collect();
        let (y, _, inv_std) = kernels::normalize_groups(self.value(x).data(), c, members, T::lit(eps));
        let value = Tensor::new(&[n, c, h, w], y)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::BatchNorm { x, inv_std }, needs))
    }

    /// Parameter-free group normalization: per sample over channel groups.
    pub fn group_norm(&mut self, x: Var, groups: usize, eps: f64) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if groups == 0 || c % groups != 0 {
            return shape_err(format!("group_norm: {c} channels not divisible into {groups} groups"));
        }
        let span = (c / groups) * h * w;
        let members = move |g: usize| vec![g * span..(g + 1) * span];
        let (y, _, inv_std) =
            kernels::normalize_groups(self.value(x).data(), n * groups, members, T::lit(eps));
        let value = Tensor::new(&[n, c, h, w], y)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::GroupNorm { x, groups, inv_std }, needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let needs = self.needs(x);
        self.push(value, Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).mean());
        let needs = self.needs(x);
        self.push(value, Op::Mean(x), needs)
    }

    /// Forward value `replacement`, gradient routed unchanged to `x`.
    pub fn straight_through(&mut self, x: Var, replacement: Tensor<T>) -> Result<Var> {
        self.value(x).expect_same_shape(&replacement)?;
        let needs = self.needs(x);
        Ok(self.push(replacement, Op::StraightThrough(x), needs))
    }

    /// A scalar computed outside the graph whose gradient w.r.t. `x` is known.
    pub fn external_scalar(&mut self, x: Var, value: T, grad: Tensor<T>) -> Result<Var> {
        self.value(x).expect_same_shape(&grad)?;
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(value), Op::External { x, grad }, needs))
    }

    /// Mean squared difference between two same-shape variables.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// Mean absolute difference between two same-shape variables.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let ab = self.abs(d);
        Ok(self.mean(ab))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return shape_err(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geo } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    geo,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g.data(),
                    self.needs(*x),
                    self.needs(*w),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, Tensor::new(self.value(*x).shape(), dx)?)?;
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, Tensor::new(self.value(*w).shape(), dw)?)?;
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        self.accumulate(grads, *b, Tensor::new(self.value(*b).shape(), db)?)?;
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (n, din) = self.value(*x).dims2()?;
                let (dout, _) = self.value(*w).dims2()?;
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); n * din];
                    T::gemm(n, dout, din, g.data(), false, self.value(*w).data(), false, &mut dx, T::zero());
                    self.accumulate(grads, *x, Tensor::new(&[n, din], dx)?)?;
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); dout * din];
                    T::gemm(dout, n, din, g.data(), true, self.value(*x).data(), false, &mut dw, T::zero());
                    self.accumulate(grads, *w, Tensor::new(&[dout, din], dw)?)?;
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![T::zero(); dout];
                        for row in g.data().chunks_exact(dout) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        self.accumulate(grads, *b, Tensor::new(self.value(*b).shape(), db)?)?;
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.map(|v| -v))?;
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y)?)?;
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y)?)?;
                }
            }
            Op::AddPerChannel { x, v } => {
                self.accumulate(grads, *x, g.clone())?;
                if self.needs(*v) {
                    let (_, _, h, w) = g.dims4()?;
                    let sums: Vec<T> = g
                        .data()
                        .chunks_exact(h * w)
                        .map(|p| p.iter().copied().sum())
                        .collect();
                    self.accumulate(grads, *v, Tensor::new(self.value(*v).shape(), sums)?)?;
                }
            }
            Op::ChannelAffine { x, scale, shift } => {
                let (_, c, h, w) = g.dims4()?;
                let s = self.value(*scale).data();
                let xv = self.value(*x).data();
                let mut ds = vec![T::zero(); c];
                let mut dt = vec![T::zero(); c];
                let mut dx = vec![T::zero(); g.numel()];
                for (i, plane) in g.data().chunks_exact(h * w).enumerate() {
                    let ch = i % c;
                    let base = i * h * w;
                    for (j, &gv) in plane.iter().enumerate() {
                        dx[base + j] = gv * s[ch];
                        ds[ch] += gv * xv[base + j];
                        dt[ch] += gv;
                    }
                }
                if self.needs(*x) {
                    self.accumulate(grads, *x, Tensor::new(g.shape(), dx)?)?;
                }
                if self.needs(*scale) {
                    self.accumulate(grads, *scale, Tensor::new(self.value(*scale).shape(), ds)?)?;
                }
                if self.needs(*shift) {
                    self.accumulate(grads, *shift, Tensor::new(self.value(*shift).shape(), dt)?)?;
                }
            }
            Op::Unary(kind, x) => {
                let input = self.value(*x).data();
                let output = node.value.data();
                let data: Vec<T> = g
                    .data()
                    .iter()
                    .zip(input.iter().zip(output))
                    .map(|(&gv, (&xi, &yi))| gv * unary_derivative(*kind, xi, yi))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(g.shape(), data)?)?;
            }
            Op::Upsample2(x) => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let dx = kernels::upsample2_backward(g.data(), n * c, h, w);
                self.accumulate(grads, *x, Tensor::new(&[n, c, h, w], dx)?)?;
            }
            Op::AvgPool2(x) => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let dx = kernels::avgpool2_backward(g.data(), n * c, h, w);
                self.accumulate(grads, *x, Tensor::new(&[n, c, h, w], dx)?)?;
            }
            Op::Concat(parts) => {
                let (n, total, h, w) = g.dims4()?;
                let hw = h * w;
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).dims4()?.1;
                    if self.needs(p) {
                        let mut out = Vec::with_capacity(n * pc * hw);
                        for b in 0..n {
                            let start = (b * total + offset) * hw;
                            out.extend_from_slice(&g.data()[start..start + pc * hw]);
                        }
                        self.accumulate(grads, p, Tensor::new(&[n, pc, h, w], out)?)?;
                    }
                    offset += pc;
                }
            }
            Op::SliceChannels { x, start } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let len = g.dims4()?.1;
                let hw = h * w;
                let mut dx = vec![T::zero(); n * c * hw];
                for b in 0..n {
                    let dst = (b * c + start) * hw;
                    dx[dst..dst + len * hw].copy_from_slice(&g.data()[b * len * hw..(b + 1) * len * hw]);
                }
                self.accumulate(grads, *x, Tensor::new(&[n, c, h, w], dx)?)?;
            }
            Op::Reshape(x) => {
                let shaped = g.clone().reshape(self.value(*x).shape())?;
                self.accumulate(grads, *x, shaped)?;
            }
            Op::BatchNorm { x, inv_std } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let members =
                    move |ch: usize| (0..n).map(|b| (b * c + ch) * hw..(b * c + ch + 1) * hw).collect();
                let dx = kernels::normalize_groups_backward(node.value.data(), g.data(), inv_std, members);
                self.accumulate(grads, *x, Tensor::new(&[n, c, h, w], dx)?)?;
            }
            Op::GroupNorm { x, groups, inv_std } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let span = (c / groups) * h * w;
                let members = move |gi: usize| vec![gi * span..(gi + 1) * span];
                let dx = kernels::normalize_groups_backward(node.value.data(), g.data(), inv_std, members);
                self.accumulate(grads, *x, Tensor::new(&[n, c, h, w], dx)?)?;
            }
            Op::Sum(x) => {
                let g0 = g.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), g0))?;
            }
            Op::Mean(x) => {
                let count = T::lit(self.value(*x).numel().max(1) as f64);
                let g0 = g.data()[0] / count;
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), g0))?;
            }
            Op::StraightThrough(x) => {
                self.accumulate(grads, *x, g.clone())?;
            }
            Op::External { x, grad } => {
                let g0 = g.data()[0];
                self.accumulate(grads, *x, grad.map(|v| v * g0))?;
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.needs(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }
}

fn apply_unary<T: Scalar>(kind: Unary<T>, x: T) -> T {
    match kind {
        Unary::Relu => x.max(T::zero()),
        Unary::LeakyRelu(s) => {
            if x > T::zero() {
                x
            } else {
                x * s
            }
        }
        Unary::Silu => x / (T::one() + (-x).exp()),
        Unary::Tanh => x.tanh(),
        Unary::Sigmoid => sigmoid(x),
        Unary::Exp => x.exp(),
        Unary::Square => x * x,
        Unary::Abs => x.abs(),
        Unary::Scale(s) => x * s,
        Unary::AddScalar(s) => x + s,
    }
}

fn unary_derivative<T: Scalar>(kind: Unary<T>, x: T, y: T) -> T {
    match kind {
        Unary::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Unary::LeakyRelu(s) => {
            if x > T::zero() {
                T::one()
            } else {
                s
            }
        }
        Unary::Silu => {
            let s = sigmoid(x);
            s * (T::one() + x * (T::one() - s))
        }
        Unary::Tanh => T::one() - y * y,
        Unary::Sigmoid => y * (T::one() - y),
        Unary::Exp => y,
        Unary::Square => x + x,
        Unary::Abs => {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        }
        Unary::Scale(s) => s,
        Unary::AddScalar(_) => T::one(),
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
