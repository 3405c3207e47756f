//! Parameter containers and the small layers the network is assembled from.

use std::sync::Mutex;

use rand::Rng;

use crate::error::Result;
use crate::tensor::{BatchNormStats, BnMode, Real, Tensor, Var};

/// A learnable tensor. Holds a constant [`Var`] for inference or a leaf
/// when gradients are requested.
#[derive(Clone, Debug)]
pub struct Param<T: Real> {
    var: Var<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        Param { var: Var::constant(value) }
    }

    pub fn var(&self) -> &Var<T> {
        &self.var
    }

    pub fn value(&self) -> &Tensor<T> {
        self.var.value()
    }

    pub fn requires_grad(&self) -> bool {
        self.var.requires_grad()
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        if on != self.requires_grad() {
            let t = self.var.value().clone();
            self.var = if on { Var::leaf(t) } else { Var::constant(t) };
        }
    }

    /// Replaces the value, keeping the gradient mode.
    pub fn set_value(&mut self, value: Tensor<T>) {
        self.var = if self.requires_grad() { Var::leaf(value) } else { Var::constant(value) };
    }

    /// Substitutes an arbitrary variable (used to differentiate with respect
    /// to parameters supplied from outside).
    pub fn set_var(&mut self, var: Var<T>) {
        self.var = var;
    }
}

/// What a module exposes to visitors.
pub enum Slot<'a, T: Real> {
    Param(&'a mut Param<T>),
    /// Batch-norm running statistics with their channel count.
    Stats(&'a mut Option<BatchNormStats<T>>, usize),
}

pub trait Module<T: Real> {
    /// Calls `f` with the dotted name and slot of every parameter and buffer,
    /// always in the same order.
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>));
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Visits every parameter (not buffers) of `m`.
pub fn for_each_param<T: Real, M: Module<T> + ?Sized>(m: &mut M, mut f: impl FnMut(&str, &mut Param<T>)) {
    m.visit("", &mut |name, slot| {
        if let Slot::Param(p) = slot {
            f(name, p)
        }
    });
}

pub fn set_requires_grad<T: Real, M: Module<T> + ?Sized>(m: &mut M, on: bool) {
    for_each_param(m, |_, p| p.set_requires_grad(on));
}

pub fn param_count<T: Real, M: Module<T> + ?Sized>(m: &mut M) -> usize {
    let mut n = 0;
    for_each_param(m, |_, p| n += p.value().len());
    n
}

/// Uniform in `±1/√fan_in`.
pub fn fan_in_uniform<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let b = 1.0 / (fan_in as f64).sqrt();
    Tensor::uniform(shape, -b, b, rng)
}

/// Fully connected layer, `weight: out×in`.
#[derive(Debug)]
pub struct Linear<T: Real> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng + ?Sized>(d_in: usize, d_out: usize, bias: bool, rng: &mut R) -> Self {
        let weight = Param::new(fan_in_uniform(&[d_out, d_in], d_in, rng));
        let bias = bias.then(|| Param::new(fan_in_uniform(&[d_out], d_in, rng)));
        Linear { weight, bias }
    }

    pub fn d_out(&self) -> usize {
        self.weight.value().dim(0)
    }

    pub fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        x.fc(self.weight.var(), self.bias.as_ref().map(Param::var))
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        f(&join(prefix, "weight"), Slot::Param(&mut self.weight));
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), Slot::Param(b));
        }
    }
}

/// Stride-1 convolution with `pad = k / 2`.
#[derive(Debug)]
pub struct Conv2d<T: Real> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Real> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, k: usize, bias: bool, rng: &mut R) -> Self {
        let fan_in = c_in * k * k;
        let weight = Param::new(fan_in_uniform(&[c_out, c_in, k, k], fan_in, rng));
        let bias = bias.then(|| Param::new(fan_in_uniform(&[c_out], fan_in, rng)));
        Conv2d { weight, bias }
    }

    pub fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        let k = self.weight.value().dim(2);
        let y = x.conv2d(self.weight.var(), k / 2)?;
        match &self.bias {
            Some(b) => y.add_channel_bias(b.var()),
            None => Ok(y),
        }
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        f(&join(prefix, "weight"), Slot::Param(&mut self.weight));
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), Slot::Param(b));
        }
    }
}

/// Batch normalisation with interior-mutable running statistics, so that a
/// shared `&self` forward pass can still update them in training mode.
#[derive(Debug)]
pub struct BatchNorm<T: Real> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    stats: Mutex<Option<BatchNormStats<T>>>,
    channels: usize,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Param::new(Tensor::ones(&[channels])),
            beta: Param::new(Tensor::zeros(&[channels])),
            stats: Mutex::new(None),
            channels,
        }
    }

    pub fn forward(&self, x: &Var<T>, mode: BnMode) -> Result<Var<T>> {
        let mut stats = self.stats.lock().unwrap_or_else(|e| e.into_inner());
        x.batch_norm(self.gamma.var(), self.beta.var(), mode, &mut stats)
    }

    pub fn stats(&self) -> Option<BatchNormStats<T>> {
        self.stats.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn set_stats(&mut self, stats: Option<BatchNormStats<T>>) {
        *self.stats.get_mut().unwrap_or_else(|e| e.into_inner()) = stats;
    }
}

impl<T: Real> Module<T> for BatchNorm<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        f(&join(prefix, "gamma"), Slot::Param(&mut self.gamma));
        f(&join(prefix, "beta"), Slot::Param(&mut self.beta));
        let channels = self.channels;
        let stats = self.stats.get_mut().unwrap_or_else(|e| e.into_inner());
        f(&join(prefix, "running"), Slot::Stats(stats, channels));
    }
}

/// PReLU slopes start at 0.25.
pub const PRELU_INIT: f64 = 0.25;

#[derive(Debug)]
pub struct PRelu<T: Real> {
    pub slope: Param<T>,
}

impl<T: Real> PRelu<T> {
    pub fn new(channels: usize) -> Self {
        PRelu { slope: Param::new(Tensor::full(&[channels], T::lit(PRELU_INIT))) }
    }
}

impl<T: Real> Module<T> for PRelu<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        f(&join(prefix, "slope"), Slot::Param(&mut self.slope));
    }
}

/// 3×3 convolution (no bias) → BN → ReLU.
#[derive(Debug)]
pub struct ConvBnRelu<T: Real> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm<T>,
}

impl<T: Real> ConvBnRelu<T> {
    pub fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, k: usize, rng: &mut R) -> Self {
        ConvBnRelu { conv: Conv2d::new(c_in, c_out, k, false, rng), bn: BatchNorm::new(c_out) }
    }

    pub fn forward(&self, x: &Var<T>, mode: BnMode) -> Result<Var<T>> {
        Ok(self.bn.forward(&self.conv.forward(x)?, mode)?.relu())
    }
}

impl<T: Real> Module<T> for ConvBnRelu<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }
}
