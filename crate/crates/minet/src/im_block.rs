//! Implicit-Euler block and its explicit (residual) counterpart.
//!
//! An explicit residual step computes `x + η·f(x)`. The implicit step instead
//! solves `y = x + η·f(y)` for y; this block approximates that solution by a
//! weight-shared fixed-point recursion
//!
//! ```text
//! g_0 = x,    g_{κ+1} = g_0 + η·f(g_κ),    κ = 0..T-1
//! ```
//!
//! whose parameters are the same at every κ, so parameter count does not
//! depend on T. Gradients flow through the entire unrolled recursion. The
//! recursion always runs exactly T steps; the residual trace is diagnostic
//! only and never used for early stopping, keeping gradients deterministic.

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::ConvMeta;
use crate::layers::{BoundConv2d, BoundInstanceNorm, Conv2d, InstanceNorm};
use crate::tape::{Tape, ValueId};
use crate::tensor::{Scalar, Tensor};

/// A differentiable vector field `f` already bound to a tape: `apply` may be
/// called any number of times and reuses the same parameter leaves.
pub trait VectorField<T: Scalar> {
    fn apply(&self, tape: &mut Tape<T>, x: ValueId) -> Result<ValueId>;
}

/// `f(x) = c·x`; scalar surrogate for closed-form tests.
pub struct ScalarField<T: Scalar>(pub T);

impl<T: Scalar> VectorField<T> for ScalarField<T> {
    fn apply(&self, tape: &mut Tape<T>, x: ValueId) -> Result<ValueId> {
        Ok(tape.scale(x, self.0))
    }
}

/// `f(x) = Ax` on `(1, d, 1, 1)` vectors; linear surrogate with an explicit
/// matrix, used to compare the recursion against `(I - ηA)^{-1} g_0`.
pub struct LinearField {
    w: ValueId,
    b: ValueId,
}

impl LinearField {
    /// `a` is a dense `d x d` matrix in row-major order.
    pub fn new<T: Scalar>(tape: &mut Tape<T>, d: usize, a: &[f64]) -> Self {
        debug_assert_eq!(a.len(), d * d);
        let w = tape.constant([d, d, 1, 1], a.iter().map(|&v| T::from_f64(v)).collect());
        let b = tape.constant([1, d, 1, 1], vec![T::zero(); d]);
        LinearField { w, b }
    }
}

impl<T: Scalar> VectorField<T> for LinearField {
    fn apply(&self, tape: &mut Tape<T>, x: ValueId) -> Result<ValueId> {
        tape.linear(x, self.w, self.b)
    }
}

/// Parameters of the feature-extraction field inside one block:
/// DCONV -> IN -> ReLU -> DCONV -> IN, both convolutions sharing one
/// dilation rate, stride 1, pad = dilation so shape is preserved. The final
/// norm has no trailing activation so the field can emit negative
/// corrections.
pub struct MleParams<T: Scalar> {
    pub conv1: Conv2d<T>,
    pub norm1: InstanceNorm<T>,
    pub conv2: Conv2d<T>,
    pub norm2: InstanceNorm<T>,
}

impl<T: Scalar> MleParams<T> {
    pub fn new<R: Rng>(rng: &mut R, channels: usize, dilation: usize) -> Self {
        let meta = ConvMeta::new(1, dilation, dilation);
        MleParams {
            conv1: Conv2d::new(rng, channels, channels, 3, meta),
            norm1: InstanceNorm::new(channels),
            conv2: Conv2d::new(rng, channels, channels, 3, meta),
            norm2: InstanceNorm::new(channels),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>, binds: &mut Vec<ValueId>) -> BoundMle<T> {
        BoundMle {
            conv1: self.conv1.bind(tape, binds),
            norm1: self.norm1.bind(tape, binds),
            conv2: self.conv2.bind(tape, binds),
            norm2: self.norm2.bind(tape, binds),
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (sub, params) in [
            ("conv1", self.conv1.params()),
            ("norm1", self.norm1.params()),
            ("conv2", self.conv2.params()),
            ("norm2", self.norm2.params()),
        ] {
            for (name, t) in params {
                out.push((format!("{sub}.{name}"), t));
            }
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (sub, params) in [
            ("conv1", self.conv1.params_mut()),
            ("norm1", self.norm1.params_mut()),
            ("conv2", self.conv2.params_mut()),
            ("norm2", self.norm2.params_mut()),
        ] {
            for (name, t) in params {
                out.push((format!("{sub}.{name}"), t));
            }
        }
        out
    }

    /// Zeroes both conv layers, making the field identically zero
    /// (normalizing an all-zero plane yields zero).
    pub fn zero_field(&mut self) {
        for t in [
            &mut self.conv1.weight,
            &mut self.conv1.bias,
            &mut self.conv2.weight,
            &mut self.conv2.bias,
        ] {
            for v in t.data.iter_mut() {
                *v = T::zero();
            }
        }
    }
}

/// [`MleParams`] bound to a tape; implements the field
/// `f(x) = IN₂(DCONV₂(relu(IN₁(DCONV₁(x)))))`.
pub struct BoundMle<T: Scalar> {
    conv1: BoundConv2d,
    norm1: BoundInstanceNorm<T>,
    conv2: BoundConv2d,
    norm2: BoundInstanceNorm<T>,
}

impl<T: Scalar> BoundMle<T> {
    pub fn from_parts(
        conv1: BoundConv2d,
        norm1: BoundInstanceNorm<T>,
        conv2: BoundConv2d,
        norm2: BoundInstanceNorm<T>,
    ) -> Self {
        BoundMle {
            conv1,
            norm1,
            conv2,
            norm2,
        }
    }
}

impl<T: Scalar> VectorField<T> for BoundMle<T> {
    fn apply(&self, tape: &mut Tape<T>, x: ValueId) -> Result<ValueId> {
        let y = self.conv1.apply(tape, x)?;
        let y = self.norm1.apply(tape, y)?;
        let y = tape.relu(y);
        let y = self.conv2.apply(tape, y)?;
        self.norm2.apply(tape, y)
    }
}

/// Relative step sizes of the recursion:
/// `residuals[κ] = ‖g_{κ+1} - g_κ‖₂ / max(‖g_κ‖₂, 1e-12)`, length exactly T.
#[derive(Debug, Clone)]
pub struct IMBlockTrace {
    pub residuals: Vec<f64>,
}

fn relative_residual<T: Scalar>(next: &[T], prev: &[T]) -> f64 {
    let mut diff_sq = 0.0f64;
    let mut prev_sq = 0.0f64;
    for (&a, &b) in next.iter().zip(prev) {
        let d = a.to_f64s() - b.to_f64s();
        diff_sq += d * d;
        let p = b.to_f64s();
        prev_sq += p * p;
    }
    diff_sq.sqrt() / prev_sq.sqrt().max(1e-12)
}

/// Runs the fixed-point recursion for exactly `t` steps with shared
/// parameters and returns the final iterate plus the residual trace.
pub fn im_block_forward<T: Scalar, F: VectorField<T>>(
    tape: &mut Tape<T>,
    x: ValueId,
    field: &F,
    t: usize,
    eta: T,
) -> Result<(ValueId, IMBlockTrace)> {
    if t < 1 {
        return Err(Error::InvalidArgument(
            "im_block_forward: iteration count must be at least 1".into(),
        ));
    }
    let g0 = x;
    let mut g = x;
    let mut residuals = Vec::with_capacity(t);
    for kappa in 0..t {
        let fg = field.apply(tape, g)?;
        let step = tape.scale(fg, eta);
        let next = tape.add(g0, step)?;
        if !tape.value(next).iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteIteration { kappa });
        }
        residuals.push(relative_residual(tape.value(next), tape.value(g)));
        g = next;
    }
    Ok((g, IMBlockTrace { residuals }))
}

/// Explicit residual step `x + η·f(x)`: the T = 1 case of the recursion, on
/// the identical floating-point path.
pub fn resblock_forward<T: Scalar, F: VectorField<T>>(
    tape: &mut Tape<T>,
    x: ValueId,
    field: &F,
    eta: T,
) -> Result<ValueId> {
    let (y, _) = im_block_forward(tape, x, field, 1, eta)?;
    Ok(y)
}
