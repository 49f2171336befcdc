//! Dense-array differentiation substrate.
//!
//! Provides exactly the layer set the diffuser and codecs need: dense
//! (affine) layers, same-padding 1-d convolution, mish/silu activations,
//! group normalization, plus a define-by-run gradient tape ([`Graph`]), a
//! named parameter store and an Adam optimizer.
//!
//! Storage is 32-bit; reductions (sums, means, normalization statistics)
//! accumulate in 64-bit. The tape is generic over the scalar so gradient
//! checks can run the identical code paths in `f64`.

mod adam;
mod graph;
mod store;

pub use adam::AdamState;
pub use graph::{Graph, Var};
pub use store::{CheckpointMeta, ParameterStore};

use crate::error::{Result, VqcdError};
use crate::rng::Prng;

/// Scalar type the tape is generic over.
pub trait Real:
    Copy
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + PartialEq
    + PartialOrd
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + 'static
{
    fn zero() -> Self;
    fn one() -> Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn exp(self) -> Self;
    fn ln_1p(self) -> Self;
    fn tanh(self) -> Self;
}

impl Real for f32 {
    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln_1p(self) -> Self {
        f32::ln_1p(self)
    }
    fn tanh(self) -> Self {
        f32::tanh(self)
    }
}

impl Real for f64 {
    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln_1p(self) -> Self {
        f64::ln_1p(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
}

/// Row-major dense array with optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(VqcdError::ShapeMismatch {
                op: "tensor_new",
                expected: shape.clone(),
                got: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
            grad: None,
        }
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
            grad: None,
        }
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn(shape: Vec<usize>, std: f32, rng: &mut Prng) -> Self {
        let n: usize = shape.iter().product();
        let mut data = vec![0.0f32; n];
        crate::rng::fill_normal_f32(rng, &mut data);
        for v in &mut data {
            *v *= std;
        }
        Self {
            shape,
            data,
            grad: None,
        }
    }

    /// Fan-in scaled init for dense/conv kernels: std = 1/sqrt(fan_in).
    pub fn kaiming(shape: Vec<usize>, fan_in: usize, rng: &mut Prng) -> Self {
        Self::randn(shape, 1.0 / (fan_in.max(1) as f32).sqrt(), rng)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// Zero-filled gradient buffer, allocating on first use.
    pub fn grad_mut(&mut self) -> &mut [f32] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    pub fn set_grad_zero(&mut self) {
        let n = self.data.len();
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
            None => self.grad = Some(vec![0.0; n]),
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }
}
