//! Minimal CPU layers with explicit forward/backward passes.
//!
//! Layers cache what their backward pass needs during a training-mode forward
//! and accumulate parameter gradients into [`Param::grad`]. Evaluation-mode
//! forwards cache nothing and never touch normalization statistics.

mod conv;
mod gemm;
mod linear;
mod norm;

pub use conv::Conv2d;
pub use linear::Linear;
pub use norm::BatchNorm2d;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "{} values cannot fill shape {shape:?}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `[N, C, H, W]` dimensions; errors on any other rank.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(format!("expected a 4-d tensor, got {:?}", self.shape))),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match *self.shape.as_slice() {
            [n, d] => Ok((n, d)),
            _ => Err(Error::shape(format!("expected a 2-d tensor, got {:?}", self.shape))),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Stacks equally shaped samples along a new leading axis.
    pub fn stack(items: &[&[f32]], item_shape: &[usize]) -> Result<Tensor> {
        let per: usize = item_shape.iter().product();
        let mut data = Vec::with_capacity(per * items.len());
        for item in items {
            if item.len() != per {
                return Err(Error::shape(format!(
                    "sample of {} values in a batch of shape {item_shape:?}",
                    item.len()
                )));
            }
            data.extend_from_slice(item);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(item_shape);
        Tensor::from_vec(&shape, data)
    }
}

/// A trainable parameter and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    /// Whether weight decay applies (false for biases and shifts).
    pub decay: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: &[usize], value: Vec<f32>, decay: bool) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let n = value.len();
        Param {
            name: name.into(),
            shape: shape.to_vec(),
            value,
            grad: vec![0.0; n],
            decay,
        }
    }

    pub fn kaiming_normal(name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let n = shape.iter().product();
        let value = (0..n)
            .map(|_| (rng.sample::<f64, _>(StandardNormal) * std) as f32)
            .collect();
        Param::new(name, shape, value, true)
    }

    pub fn uniform(name: impl Into<String>, shape: &[usize], bound: f32, decay: bool, rng: &mut Rng) -> Self {
        let n = shape.iter().product();
        let value = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        Param::new(name, shape, value, decay)
    }

    pub fn constant(name: impl Into<String>, shape: &[usize], v: f32, decay: bool) -> Self {
        let n = shape.iter().product();
        Param::new(name, shape, vec![v; n], decay)
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Non-trainable state carried in checkpoints (normalization statistics).
#[derive(Debug, Clone, PartialEq)]
pub struct Buffer {
    pub name: String,
    pub value: Vec<f32>,
}

/// Training mode uses batch statistics and records activations for backward;
/// evaluation mode uses running statistics and records nothing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub(crate) fn relu_forward(x: &mut Tensor) {
    x.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes `grad` wherever the post-activation `out` was clipped.
pub(crate) fn relu_backward(grad: &mut Tensor, out: &Tensor) {
    for (g, &o) in grad.data_mut().iter_mut().zip(out.data()) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// `[N, C, H, W]` -> `[N, C]` spatial mean.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let inv = 1.0 / hw as f32;
    let mut out = Vec::with_capacity(n * c);
    for plane in x.data().chunks_exact(hw) {
        out.push(plane.iter().sum::<f32>() * inv);
    }
    Tensor::from_vec(&[n, c], out)
}

pub fn global_avg_pool_backward(grad: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (n, c) = grad.dims2()?;
    let hw = h * w;
    let inv = 1.0 / hw as f32;
    let mut out = Vec::with_capacity(n * c * hw);
    for &g in grad.data() {
        out.extend(std::iter::repeat_n(g * inv, hw));
    }
    Tensor::from_vec(&[n, c, h, w], out)
}
