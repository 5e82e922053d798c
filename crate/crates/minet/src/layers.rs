//! Parameterized layers: convolutions, instance norm, and fully connected.
//!
//! Each layer owns its parameters as tensors and splits graph construction
//! into two steps: `bind` pushes the parameters onto a tape once (recording
//! their ids in order), `apply` can then be called any number of times with
//! shared weights. Binding order must match the order of `named_params`,
//! which the optimizer and checkpoint code rely on.

use rand::Rng;

use crate::error::Result;
use crate::kernels::ConvMeta;
use crate::tape::{Tape, ValueId};
use crate::tensor::{Scalar, Tensor};

/// Kaiming-uniform fan-in initialization: U(-b, b) with b = sqrt(6/fan_in).
fn kaiming_uniform<T: Scalar, R: Rng>(rng: &mut R, shape: [usize; 4], fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data)
        .expect("length matches shape")
        .requires_grad(true)
}

fn zero_param<T: Scalar>(shape: [usize; 4]) -> Tensor<T> {
    Tensor::zeros(shape).requires_grad(true)
}

/// 2-D convolution layer (cross-correlation) with stride, zero padding,
/// dilation, and groups.
pub struct Conv2d<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub meta: ConvMeta,
}

#[derive(Clone, Copy)]
pub struct BoundConv2d {
    w: ValueId,
    b: ValueId,
    meta: ConvMeta,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng>(rng: &mut R, cin: usize, cout: usize, k: usize, meta: ConvMeta) -> Self {
        let cig = cin / meta.groups;
        Conv2d {
            weight: kaiming_uniform(rng, [cout, cig, k, k], cig * k * k),
            bias: zero_param([1, cout, 1, 1]),
            meta,
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>, binds: &mut Vec<ValueId>) -> BoundConv2d {
        let w = tape.leaf(&self.weight);
        let b = tape.leaf(&self.bias);
        binds.push(w);
        binds.push(b);
        BoundConv2d {
            w,
            b,
            meta: self.meta,
        }
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![("weight", &self.weight), ("bias", &self.bias)]
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![("weight", &mut self.weight), ("bias", &mut self.bias)]
    }
}

impl BoundConv2d {
    /// Assembles a binding from nodes already on the tape; the caller owns
    /// the push order.
    pub fn from_ids(w: ValueId, b: ValueId, meta: ConvMeta) -> Self {
        BoundConv2d { w, b, meta }
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, x: ValueId) -> Result<ValueId> {
        tape.conv2d(x, self.w, self.b, self.meta)
    }
}

/// Fractionally-strided convolution layer. Weight layout is
/// `(Cin, Cout/groups, k, k)`.
pub struct ConvTranspose2d<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub meta: ConvMeta,
}

#[derive(Clone, Copy)]
pub struct BoundConvTranspose2d {
    w: ValueId,
    b: ValueId,
    meta: ConvMeta,
}

impl<T: Scalar> ConvTranspose2d<T> {
    pub fn new<R: Rng>(rng: &mut R, cin: usize, cout: usize, k: usize, meta: ConvMeta) -> Self {
        let cog = cout / meta.groups;
        ConvTranspose2d {
            weight: kaiming_uniform(rng, [cin, cog, k, k], cog * k * k),
            bias: zero_param([1, cout, 1, 1]),
            meta,
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>, binds: &mut Vec<ValueId>) -> BoundConvTranspose2d {
        let w = tape.leaf(&self.weight);
        let b = tape.leaf(&self.bias);
        binds.push(w);
        binds.push(b);
        BoundConvTranspose2d {
            w,
            b,
            meta: self.meta,
        }
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![("weight", &self.weight), ("bias", &self.bias)]
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![("weight", &mut self.weight), ("bias", &mut self.bias)]
    }
}

impl BoundConvTranspose2d {
    pub fn from_ids(w: ValueId, b: ValueId, meta: ConvMeta) -> Self {
        BoundConvTranspose2d { w, b, meta }
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, x: ValueId) -> Result<ValueId> {
        tape.conv_transpose2d(x, self.w, self.b, self.meta)
    }
}

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Instance normalization with learnable affine, gamma = 1 and beta = 0 at
/// initialization.
pub struct InstanceNorm<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub eps: T,
}

#[derive(Clone, Copy)]
pub struct BoundInstanceNorm<T: Scalar> {
    gamma: ValueId,
    beta: ValueId,
    eps: T,
}

impl<T: Scalar> InstanceNorm<T> {
    pub fn new(c: usize) -> Self {
        InstanceNorm {
            gamma: Tensor::full([1, c, 1, 1], T::one()).requires_grad(true),
            beta: zero_param([1, c, 1, 1]),
            eps: T::from_f64(INSTANCE_NORM_EPS),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>, binds: &mut Vec<ValueId>) -> BoundInstanceNorm<T> {
        let gamma = tape.leaf(&self.gamma);
        let beta = tape.leaf(&self.beta);
        binds.push(gamma);
        binds.push(beta);
        BoundInstanceNorm {
            gamma,
            beta,
            eps: self.eps,
        }
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![("gamma", &self.gamma), ("beta", &self.beta)]
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![("gamma", &mut self.gamma), ("beta", &mut self.beta)]
    }
}

impl<T: Scalar> BoundInstanceNorm<T> {
    pub fn from_ids(gamma: ValueId, beta: ValueId, eps: T) -> Self {
        BoundInstanceNorm { gamma, beta, eps }
    }

    pub fn apply(&self, tape: &mut Tape<T>, x: ValueId) -> Result<ValueId> {
        tape.instance_norm(x, self.gamma, self.beta, self.eps)
    }
}

/// Fully connected layer on `(N, C, 1, 1)` channel descriptors.
pub struct Linear<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Copy)]
pub struct BoundLinear {
    w: ValueId,
    b: ValueId,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng>(rng: &mut R, cin: usize, cout: usize) -> Self {
        Linear {
            weight: kaiming_uniform(rng, [cout, cin, 1, 1], cin),
            bias: zero_param([1, cout, 1, 1]),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>, binds: &mut Vec<ValueId>) -> BoundLinear {
        let w = tape.leaf(&self.weight);
        let b = tape.leaf(&self.bias);
        binds.push(w);
        binds.push(b);
        BoundLinear { w, b }
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![("weight", &self.weight), ("bias", &self.bias)]
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![("weight", &mut self.weight), ("bias", &mut self.bias)]
    }
}

impl BoundLinear {
    pub fn from_ids(w: ValueId, b: ValueId) -> Self {
        BoundLinear { w, b }
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, x: ValueId) -> Result<ValueId> {
        tape.linear(x, self.w, self.b)
    }
}
