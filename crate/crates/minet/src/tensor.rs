//! Dense rank-4 tensor value type.
//!
//! Every array in the crate is a `(batch, channel, height, width)` tensor in
//! row-major order. Element precision is selectable between `f32` and `f64`
//! through the [`Scalar`] trait; `f64` is the default for tests and
//! finite-difference oracles, `f32` is available for training speed.

use std::fmt;

use num_traits::Float;

use crate::error::{Error, Result};

/// Element type for tensors. Implemented for `f32` and `f64`.
pub trait Scalar: Float + fmt::Debug + fmt::Display + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64s(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64s(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64s(self) -> f64 {
        self
    }
}

/// Tensor shape as `[batch, channel, height, width]`.
pub type Shape = [usize; 4];

pub fn shape_numel(shape: &Shape) -> usize {
    shape.iter().product()
}

pub fn shape_string(shape: &Shape) -> String {
    format!("{}x{}x{}x{}", shape[0], shape[1], shape[2], shape[3])
}

/// A dense `(N, C, H, W)` array with an optional gradient slot.
///
/// Gradients accumulate additively across fan-out; [`Tensor::zero_grad`]
/// resets them.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    pub shape: Shape,
    pub data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape_numel(&shape)],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape_numel(&shape)],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape_numel(&shape) {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                expected: format!("{} elements", shape_numel(&shape)),
                got: format!("{}", data.len()),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Scalar tensor of shape (1,1,1,1).
    pub fn scalar(value: T) -> Self {
        Tensor::full([1, 1, 1, 1], value)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    /// Sum of squares, computed in a fixed loop order.
    pub fn sq_norm(&self) -> f64 {
        let mut acc = 0.0f64;
        for &v in &self.data {
            let x = v.to_f64s();
            acc += x * x;
        }
        acc
    }

    pub fn norm(&self) -> f64 {
        self.sq_norm().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reports a [`Error::NonFinite`] if any element is NaN or infinite.
    pub fn validate_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite {
                context: context.to_string(),
            })
        }
    }

    /// Adds `g` into the gradient slot, allocating it at zero first if absent.
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "accumulate_grad",
                expected: format!("{} elements", self.data.len()),
                got: format!("{}", g.len()),
            });
        }
        let grad = self
            .grad
            .get_or_insert_with(|| vec![T::zero(); self.data.len()]);
        for (a, b) in grad.iter_mut().zip(g) {
            *a = *a + *b;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            for v in g.iter_mut() {
                *v = T::zero();
            }
        }
    }

    /// Lossy element-wise precision conversion.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64s())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
            grad: None,
        }
    }
}
