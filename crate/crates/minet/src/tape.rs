//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Forward operations append nodes in topological order; `backward` walks the
//! tape once in reverse, accumulating gradients additively so shared
//! subexpressions are handled for free. A tape is single-shot: `backward`
//! consumes the graph and a second call fails with [`Error::GraphConsumed`].
//!
//! Shapes are always rank-4 `(N, C, H, W)`. There is no general broadcasting;
//! the few broadcast-like patterns the model needs are dedicated operations
//! (`mul_chan`, `mul_gate`).

use crate::error::{Error, Result};
use crate::kernels::{
    conv2d_backward, conv2d_forward, conv2d_output_shape, conv_transpose2d_backward,
    conv_transpose2d_forward, conv_transpose2d_output_shape, global_avg_pool_backward,
    global_avg_pool_forward, instance_norm_backward, instance_norm_forward, linear_backward,
    linear_forward, softmax_channels_backward, softmax_channels_forward, ConvMeta,
};
use crate::tensor::{shape_string, Scalar, Shape, Tensor};

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

enum Op<T: Scalar> {
    Leaf,
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    Scale(ValueId, T),
    Relu(ValueId),
    Sigmoid(ValueId),
    Abs(ValueId),
    Conv2d {
        x: ValueId,
        w: ValueId,
        b: ValueId,
        meta: ConvMeta,
    },
    ConvTranspose2d {
        x: ValueId,
        w: ValueId,
        b: ValueId,
        meta: ConvMeta,
    },
    InstanceNorm {
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        mus: Vec<T>,
        inv_stds: Vec<T>,
    },
    GlobalAvgPool(ValueId),
    Linear {
        x: ValueId,
        w: ValueId,
        b: ValueId,
    },
    ConcatChannels(Vec<ValueId>),
    SliceChannels {
        x: ValueId,
        from: usize,
    },
    SoftmaxChannels(ValueId),
    MulChan {
        x: ValueId,
        map: ValueId,
    },
    MulGate {
        x: ValueId,
        gate: ValueId,
    },
    MeanAll(ValueId),
}

struct Node<T: Scalar> {
    op: Op<T>,
    shape: Shape,
    value: Vec<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`ValueId`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ValueId) -> Option<&[T]> {
        self.grads[id.0].as_deref()
    }

    pub fn take(&mut self, id: ValueId) -> Option<Vec<T>> {
        self.grads[id.0].take()
    }
}

/// Computation graph. Build values with the operation methods, then call
/// [`Tape::backward`] on a scalar loss.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &[T] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: ValueId) -> &Shape {
        &self.nodes[id.0].shape
    }

    pub fn to_tensor(&self, id: ValueId) -> Tensor<T> {
        Tensor::from_vec(*self.shape(id), self.value(id).to_vec()).expect("node value fits shape")
    }

    fn push(&mut self, op: Op<T>, shape: Shape, value: Vec<T>, needs_grad: bool) -> ValueId {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            op,
            shape,
            value,
            needs_grad,
        });
        ValueId(self.nodes.len() - 1)
    }

    fn needs(&self, id: ValueId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Copies a tensor onto the tape as a leaf. Gradient participation
    /// follows the tensor's `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor<T>) -> ValueId {
        self.push(Op::Leaf, t.shape, t.data.clone(), t.requires_grad)
    }

    /// Pushes raw data as a non-differentiable leaf.
    pub fn constant(&mut self, shape: Shape, data: Vec<T>) -> ValueId {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.push(Op::Leaf, shape, data, false)
    }

    fn same_shape(&self, op: &'static str, a: ValueId, b: ValueId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                expected: shape_string(self.shape(a)),
                got: shape_string(self.shape(b)),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.same_shape("add", a, b)?;
        let v = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), *self.shape(a), v, needs))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.same_shape("sub", a, b)?;
        let v = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x - y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), *self.shape(a), v, needs))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.same_shape("mul", a, b)?;
        let v = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), *self.shape(a), v, needs))
    }

    pub fn scale(&mut self, a: ValueId, c: T) -> ValueId {
        let v = self.value(a).iter().map(|&x| x * c).collect();
        let needs = self.needs(a);
        self.push(Op::Scale(a, c), *self.shape(a), v, needs)
    }

    pub fn relu(&mut self, a: ValueId) -> ValueId {
        let v = self
            .value(a)
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let needs = self.needs(a);
        self.push(Op::Relu(a), *self.shape(a), v, needs)
    }

    pub fn sigmoid(&mut self, a: ValueId) -> ValueId {
        let one = T::one();
        let v = self
            .value(a)
            .iter()
            .map(|&x| one / (one + (-x).exp()))
            .collect();
        let needs = self.needs(a);
        self.push(Op::Sigmoid(a), *self.shape(a), v, needs)
    }

    pub fn abs(&mut self, a: ValueId) -> ValueId {
        let v = self.value(a).iter().map(|&x| x.abs()).collect();
        let needs = self.needs(a);
        self.push(Op::Abs(a), *self.shape(a), v, needs)
    }

    pub fn conv2d(&mut self, x: ValueId, w: ValueId, b: ValueId, meta: ConvMeta) -> Result<ValueId> {
        let (xs, ws) = (*self.shape(x), *self.shape(w));
        if ws[0] % meta.groups != 0 {
            return Err(Error::InvalidArgument(format!(
                "conv2d: {} output channels not divisible by {} groups",
                ws[0], meta.groups
            )));
        }
        if ws[1] * meta.groups != xs[1] {
            return Err(Error::ChannelMismatch {
                op: "conv2d",
                expected: ws[1] * meta.groups,
                got: xs[1],
            });
        }
        let os = conv2d_output_shape(&xs, &ws, &meta)?;
        self.check_bias("conv2d", b, ws[0])?;
        let v = conv2d_forward(self.value(x), &xs, self.value(w), &ws, self.value(b), &meta, &os);
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Op::Conv2d { x, w, b, meta }, os, v, needs))
    }

    pub fn conv_transpose2d(
        &mut self,
        x: ValueId,
        w: ValueId,
        b: ValueId,
        meta: ConvMeta,
    ) -> Result<ValueId> {
        let (xs, ws) = (*self.shape(x), *self.shape(w));
        if ws[0] != xs[1] {
            return Err(Error::ChannelMismatch {
                op: "conv_transpose2d",
                expected: ws[0],
                got: xs[1],
            });
        }
        if xs[1] % meta.groups != 0 {
            return Err(Error::InvalidArgument(format!(
                "conv_transpose2d: {} input channels not divisible by {} groups",
                xs[1], meta.groups
            )));
        }
        let os = conv_transpose2d_output_shape(&xs, &ws, &meta)?;
        self.check_bias("conv_transpose2d", b, os[1])?;
        let v = conv_transpose2d_forward(
            self.value(x),
            &xs,
            self.value(w),
            &ws,
            self.value(b),
            &meta,
            &os,
        );
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Op::ConvTranspose2d { x, w, b, meta }, os, v, needs))
    }

    fn check_bias(&self, op: &'static str, b: ValueId, cout: usize) -> Result<()> {
        let bs = self.shape(b);
        if *bs != [1, cout, 1, 1] {
            return Err(Error::ShapeMismatch {
                op,
                expected: shape_string(&[1, cout, 1, 1]),
                got: shape_string(bs),
            });
        }
        Ok(())
    }

    pub fn instance_norm(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: T,
    ) -> Result<ValueId> {
        let xs = *self.shape(x);
        self.check_bias("instance_norm", gamma, xs[1])?;
        self.check_bias("instance_norm", beta, xs[1])?;
        let (v, mus, inv_stds) =
            instance_norm_forward(self.value(x), &xs, self.value(gamma), self.value(beta), eps);
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                mus,
                inv_stds,
            },
            xs,
            v,
            needs,
        ))
    }

    pub fn global_avg_pool(&mut self, x: ValueId) -> ValueId {
        let xs = *self.shape(x);
        let v = global_avg_pool_forward(self.value(x), &xs);
        let needs = self.needs(x);
        self.push(Op::GlobalAvgPool(x), [xs[0], xs[1], 1, 1], v, needs)
    }

    /// `x` is `(N, Cin, 1, 1)`, `w` is `(Cout, Cin, 1, 1)`, `b` is `(1, Cout, 1, 1)`.
    pub fn linear(&mut self, x: ValueId, w: ValueId, b: ValueId) -> Result<ValueId> {
        let (xs, ws) = (*self.shape(x), *self.shape(w));
        if xs[2] != 1 || xs[3] != 1 || ws[2] != 1 || ws[3] != 1 {
            return Err(Error::ShapeMismatch {
                op: "linear",
                expected: "(N, C, 1, 1)".into(),
                got: shape_string(&xs),
            });
        }
        if ws[1] != xs[1] {
            return Err(Error::ChannelMismatch {
                op: "linear",
                expected: ws[1],
                got: xs[1],
            });
        }
        self.check_bias("linear", b, ws[0])?;
        let v = linear_forward(self.value(x), xs[0], xs[1], self.value(w), self.value(b));
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Op::Linear { x, w, b }, [xs[0], ws[0], 1, 1], v, needs))
    }

    pub fn concat_channels(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        let first = *self.shape(parts[0]);
        let mut c_total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[0] != first[0] || s[2] != first[2] || s[3] != first[3] {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    expected: shape_string(&first),
                    got: shape_string(s),
                });
            }
            c_total += s[1];
        }
        let (n_b, h, w) = (first[0], first[2], first[3]);
        let m = h * w;
        let mut v = vec![T::zero(); n_b * c_total * m];
        for n in 0..n_b {
            let mut c_off = 0;
            for &p in parts {
                let c = self.shape(p)[1];
                let src = &self.value(p)[n * c * m..(n + 1) * c * m];
                v[(n * c_total + c_off) * m..(n * c_total + c_off + c) * m].copy_from_slice(src);
                c_off += c;
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Op::ConcatChannels(parts.to_vec()),
            [n_b, c_total, h, w],
            v,
            needs,
        ))
    }

    pub fn slice_channels(&mut self, x: ValueId, from: usize, to: usize) -> Result<ValueId> {
        let xs = *self.shape(x);
        if from >= to || to > xs[1] {
            return Err(Error::InvalidArgument(format!(
                "slice_channels: range {from}..{to} out of {} channels",
                xs[1]
            )));
        }
        let (n_b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let m = h * w;
        let cs = to - from;
        let mut v = vec![T::zero(); n_b * cs * m];
        for n in 0..n_b {
            let src = &self.value(x)[(n * c + from) * m..(n * c + to) * m];
            v[n * cs * m..(n + 1) * cs * m].copy_from_slice(src);
        }
        let needs = self.needs(x);
        Ok(self.push(Op::SliceChannels { x, from }, [n_b, cs, h, w], v, needs))
    }

    pub fn softmax_channels(&mut self, x: ValueId) -> ValueId {
        let xs = *self.shape(x);
        let v = softmax_channels_forward(self.value(x), &xs);
        let needs = self.needs(x);
        self.push(Op::SoftmaxChannels(x), xs, v, needs)
    }

    /// Multiplies every channel of `x` by a single-channel map `(N, 1, H, W)`.
    pub fn mul_chan(&mut self, x: ValueId, map: ValueId) -> Result<ValueId> {
        let (xs, ms) = (*self.shape(x), *self.shape(map));
        if ms != [xs[0], 1, xs[2], xs[3]] {
            return Err(Error::ShapeMismatch {
                op: "mul_chan",
                expected: shape_string(&[xs[0], 1, xs[2], xs[3]]),
                got: shape_string(&ms),
            });
        }
        let (n_b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let m = h * w;
        let mut v = Vec::with_capacity(n_b * c * m);
        for n in 0..n_b {
            let mp = &self.value(map)[n * m..(n + 1) * m];
            for ci in 0..c {
                let xp = &self.value(x)[(n * c + ci) * m..(n * c + ci + 1) * m];
                for (xv, mv) in xp.iter().zip(mp) {
                    v.push(*xv * *mv);
                }
            }
        }
        let needs = self.needs(x) || self.needs(map);
        Ok(self.push(Op::MulChan { x, map }, xs, v, needs))
    }

    /// Multiplies each `(n, c)` plane of `x` by the scalar `gate[n, c]`,
    /// where `gate` is `(N, C, 1, 1)`.
    pub fn mul_gate(&mut self, x: ValueId, gate: ValueId) -> Result<ValueId> {
        let (xs, gs) = (*self.shape(x), *self.shape(gate));
        if gs != [xs[0], xs[1], 1, 1] {
            return Err(Error::ShapeMismatch {
                op: "mul_gate",
                expected: shape_string(&[xs[0], xs[1], 1, 1]),
                got: shape_string(&gs),
            });
        }
        let m = xs[2] * xs[3];
        let mut v = Vec::with_capacity(self.value(x).len());
        for (nc, plane) in self.value(x).chunks_exact(m).enumerate() {
            let g = self.value(gate)[nc];
            for &xv in plane {
                v.push(xv * g);
            }
        }
        let needs = self.needs(x) || self.needs(gate);
        Ok(self.push(Op::MulGate { x, gate }, xs, v, needs))
    }

    /// Mean over all elements, producing a `(1, 1, 1, 1)` scalar node.
    /// The sum is accumulated in `f64` regardless of `T`.
    pub fn mean_all(&mut self, x: ValueId) -> ValueId {
        let n = self.value(x).len();
        let mut sum = 0.0f64;
        for &v in self.value(x) {
            sum += v.to_f64s();
        }
        let v = vec![T::from_f64(sum / n as f64)];
        let needs = self.needs(x);
        self.push(Op::MeanAll(x), [1, 1, 1, 1], v, needs)
    }

    /// Reverse sweep from a scalar `loss` node. Consumes the graph.
    pub fn backward(&mut self, loss: ValueId) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if *self.shape(loss) != [1, 1, 1, 1] {
            return Err(Error::NonScalarLoss {
                shape: shape_string(self.shape(loss)),
            });
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let numel = |id: ValueId| nodes[id.0].value.len();
        // Adds `contrib` into the parent's gradient buffer, allocating lazily.
        // Parents that do not need gradients are skipped entirely.
        macro_rules! sink {
            ($id:expr) => {
                if nodes[$id.0].needs_grad {
                    Some(grads[$id.0].get_or_insert_with(|| vec![T::zero(); numel($id)]))
                } else {
                    None
                }
            };
        }

        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = sink!(*a) {
                    for (d, &gv) in ga.iter_mut().zip(g) {
                        *d = *d + gv;
                    }
                }
                if let Some(gb) = sink!(*b) {
                    for (d, &gv) in gb.iter_mut().zip(g) {
                        *d = *d + gv;
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = sink!(*a) {
                    for (d, &gv) in ga.iter_mut().zip(g) {
                        *d = *d + gv;
                    }
                }
                if let Some(gb) = sink!(*b) {
                    for (d, &gv) in gb.iter_mut().zip(g) {
                        *d = *d - gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = sink!(*a) {
                    for ((d, &gv), &bv) in ga.iter_mut().zip(g).zip(&nodes[b.0].value) {
                        *d = *d + gv * bv;
                    }
                }
                if let Some(gb) = sink!(*b) {
                    for ((d, &gv), &av) in gb.iter_mut().zip(g).zip(&nodes[a.0].value) {
                        *d = *d + gv * av;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = sink!(*a) {
                    for (d, &gv) in ga.iter_mut().zip(g) {
                        *d = *d + gv * *c;
                    }
                }
            }
            Op::Relu(a) => {
                if let Some(ga) = sink!(*a) {
                    for ((d, &gv), &xv) in ga.iter_mut().zip(g).zip(&nodes[a.0].value) {
                        if xv > T::zero() {
                            *d = *d + gv;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = sink!(*a) {
                    let y = &nodes[i].value;
                    for ((d, &gv), &yv) in ga.iter_mut().zip(g).zip(y) {
                        *d = *d + gv * yv * (T::one() - yv);
                    }
                }
            }
            Op::Abs(a) => {
                // subgradient at 0 is 0
                if let Some(ga) = sink!(*a) {
                    for ((d, &gv), &xv) in ga.iter_mut().zip(g).zip(&nodes[a.0].value) {
                        if xv > T::zero() {
                            *d = *d + gv;
                        } else if xv < T::zero() {
                            *d = *d - gv;
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, meta } => {
                let (dx, dw, db) = conv2d_backward(
                    g,
                    &nodes[i].shape,
                    &nodes[x.0].value,
                    &nodes[x.0].shape,
                    &nodes[w.0].value,
                    &nodes[w.0].shape,
                    meta,
                    nodes[x.0].needs_grad,
                );
                if let (Some(dx), Some(gx)) = (dx, sink!(*x)) {
                    for (d, v) in gx.iter_mut().zip(dx) {
                        *d = *d + v;
                    }
                }
                if let Some(gw) = sink!(*w) {
                    for (d, v) in gw.iter_mut().zip(dw) {
                        *d = *d + v;
                    }
                }
                if let Some(gb) = sink!(*b) {
                    for (d, v) in gb.iter_mut().zip(db) {
                        *d = *d + v;
                    }
                }
            }
            Op::ConvTranspose2d { x, w, b, meta } => {
                let (dx, dw, db) = conv_transpose2d_backward(
                    g,
                    &nodes[i].shape,
                    &nodes[x.0].value,
                    &nodes[x.0].shape,
                    &nodes[w.0].value,
                    &nodes[w.0].shape,
                    meta,
                    nodes[x.0].needs_grad,
                );
                if let (Some(dx), Some(gx)) = (dx, sink!(*x)) {
                    for (d, v) in gx.iter_mut().zip(dx) {
                        *d = *d + v;
                    }
                }
                if let Some(gw) = sink!(*w) {
                    for (d, v) in gw.iter_mut().zip(dw) {
                        *d = *d + v;
                    }
                }
                if let Some(gb) = sink!(*b) {
                    for (d, v) in gb.iter_mut().zip(db) {
                        *d = *d + v;
                    }
                }
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                mus,
                inv_stds,
            } => {
                let (dx, dgamma, dbeta) = instance_norm_backward(
                    g,
                    &nodes[x.0].value,
                    &nodes[x.0].shape,
                    &nodes[gamma.0].value,
                    mus,
                    inv_stds,
                );
                if let Some(gx) = sink!(*x) {
                    for (d, v) in gx.iter_mut().zip(dx) {
                        *d = *d + v;
                    }
                }
                if let Some(gg) = sink!(*gamma) {
                    for (d, v) in gg.iter_mut().zip(dgamma) {
                        *d = *d + v;
                    }
                }
                if let Some(gb) = sink!(*beta) {
                    for (d, v) in gb.iter_mut().zip(dbeta) {
                        *d = *d + v;
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                if let Some(gx) = sink!(*x) {
                    let dx = global_avg_pool_backward(g, &nodes[x.0].shape);
                    for (d, v) in gx.iter_mut().zip(dx) {
                        *d = *d + v;
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let xs = &nodes[x.0].shape;
                let cout = nodes[i].shape[1];
                let (dx, dw, db) = linear_backward(
                    g,
                    &nodes[x.0].value,
                    xs[0],
                    xs[1],
                    cout,
                    &nodes[w.0].value,
                );
                if let Some(gx) = sink!(*x) {
                    for (d, v) in gx.iter_mut().zip(dx) {
                        *d = *d + v;
                    }
                }
                if let Some(gw) = sink!(*w) {
                    for (d, v) in gw.iter_mut().zip(dw) {
                        *d = *d + v;
                    }
                }
                if let Some(gb) = sink!(*b) {
                    for (d, v) in gb.iter_mut().zip(db) {
                        *d = *d + v;
                    }
                }
            }
            Op::ConcatChannels(parts) => {
                let os = &nodes[i].shape;
                let (n_b, c_total, m) = (os[0], os[1], os[2] * os[3]);
                let mut c_off = 0;
                for &p in parts {
                    let c = nodes[p.0].shape[1];
                    if let Some(gp) = sink!(p) {
                        for n in 0..n_b {
                            let src = &g[(n * c_total + c_off) * m..(n * c_total + c_off + c) * m];
                            let dst = &mut gp[n * c * m..(n + 1) * c * m];
                            for (d, &v) in dst.iter_mut().zip(src) {
                                *d = *d + v;
                            }
                        }
                    }
                    c_off += c;
                }
            }
            Op::SliceChannels { x, from } => {
                let os = &nodes[i].shape;
                let (n_b, cs, m) = (os[0], os[1], os[2] * os[3]);
                let c = nodes[x.0].shape[1];
                if let Some(gx) = sink!(*x) {
                    for n in 0..n_b {
                        let src = &g[n * cs * m..(n + 1) * cs * m];
                        let dst = &mut gx[(n * c + from) * m..(n * c + from + cs) * m];
                        for (d, &v) in dst.iter_mut().zip(src) {
                            *d = *d + v;
                        }
                    }
                }
            }
            Op::SoftmaxChannels(x) => {
                if let Some(gx) = sink!(*x) {
                    let dx = softmax_channels_backward(g, &nodes[i].value, &nodes[i].shape);
                    for (d, v) in gx.iter_mut().zip(dx) {
                        *d = *d + v;
                    }
                }
            }
            Op::MulChan { x, map } => {
                let xs = &nodes[x.0].shape;
                let (n_b, c, m) = (xs[0], xs[1], xs[2] * xs[3]);
                if let Some(gx) = sink!(*x) {
                    let mv = &nodes[map.0].value;
                    for n in 0..n_b {
                        let mp = &mv[n * m..(n + 1) * m];
                        for ci in 0..c {
                            let base = (n * c + ci) * m;
                            for (p, &mpv) in mp.iter().enumerate() {
                                gx[base + p] = gx[base + p] + g[base + p] * mpv;
                            }
                        }
                    }
                }
                if let Some(gm) = sink!(*map) {
                    let xv = &nodes[x.0].value;
                    for n in 0..n_b {
                        for ci in 0..c {
                            let base = (n * c + ci) * m;
                            let dst = &mut gm[n * m..(n + 1) * m];
                            for (p, d) in dst.iter_mut().enumerate() {
                                *d = *d + g[base + p] * xv[base + p];
                            }
                        }
                    }
                }
            }
            Op::MulGate { x, gate } => {
                let xs = &nodes[x.0].shape;
                let m = xs[2] * xs[3];
                if let Some(gx) = sink!(*x) {
                    let gv = &nodes[gate.0].value;
                    for (nc, chunk) in gx.chunks_exact_mut(m).enumerate() {
                        let s = gv[nc];
                        for (p, d) in chunk.iter_mut().enumerate() {
                            *d = *d + g[nc * m + p] * s;
                        }
                    }
                }
                if let Some(gg) = sink!(*gate) {
                    let xv = &nodes[x.0].value;
                    for (nc, d) in gg.iter_mut().enumerate() {
                        let mut acc = T::zero();
                        for p in 0..m {
                            acc = acc + g[nc * m + p] * xv[nc * m + p];
                        }
                        *d = *d + acc;
                    }
                }
            }
            Op::MeanAll(x) => {
                if let Some(gx) = sink!(*x) {
                    let scale = g[0] / T::from_f64(gx.len() as f64);
                    for d in gx.iter_mut() {
                        *d = *d + scale;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf_grad(shape: Shape, data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data).unwrap().requires_grad(true)
    }

    #[test]
    fn quadratic_gradient() {
        // loss = mean(x^2), dloss/dx_i = 2 x_i / n
        let mut tape = Tape::new();
        let x = tape.leaf(&leaf_grad([1, 1, 2, 2], vec![1.0, -2.0, 3.0, 0.5]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.mean_all(sq);
        let grads = tape.backward(loss).unwrap();
        let gx = grads.get(x).unwrap();
        for (g, v) in gx.iter().zip([1.0, -2.0, 3.0, 0.5]) {
            assert!((g - 2.0 * v / 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // loss = mean(x + x) -> dloss/dx_i = 2/n
        let mut tape = Tape::new();
        let x = tape.leaf(&leaf_grad([1, 1, 1, 3], vec![1.0, 2.0, 3.0]));
        let s = tape.add(x, x).unwrap();
        let loss = tape.mean_all(s);
        let grads = tape.backward(loss).unwrap();
        for &g in grads.get(x).unwrap() {
            assert!((g - 2.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_consumes_graph() {
        let mut tape = Tape::new();
        let x = tape.leaf(&leaf_grad([1, 1, 1, 1], vec![2.0]));
        let loss = tape.mean_all(x);
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::GraphConsumed)));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(&leaf_grad([1, 1, 1, 3], vec![1.0, 2.0, 3.0]));
        assert!(matches!(
            tape.backward(x),
            Err(Error::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn relu_and_abs_subgradients_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(&leaf_grad([1, 1, 1, 3], vec![-1.0, 0.0, 2.0]));
        let r = tape.relu(x);
        let a = tape.abs(x);
        let s = tape.add(r, a).unwrap();
        let loss = tape.mean_all(s);
        let grads = tape.backward(loss).unwrap();
        let gx = grads.get(x).unwrap();
        // relu' = [0, 0, 1]; abs' = [-1, 0, 1]; mean divides by 3
        assert!((gx[0] - (-1.0 / 3.0)).abs() < 1e-15);
        assert_eq!(gx[1], 0.0);
        assert!((gx[2] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn no_grad_leaf_stays_untracked() {
        let mut tape = Tape::new();
        let x = tape.constant([1, 1, 1, 2], vec![1.0f64, 2.0]);
        let y = tape.leaf(&leaf_grad([1, 1, 1, 2], vec![3.0, 4.0]));
        let p = tape.mul(x, y).unwrap();
        let loss = tape.mean_all(p);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).is_none());
        let gy = grads.get(y).unwrap();
        assert!((gy[0] - 0.5).abs() < 1e-15);
        assert!((gy[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn concat_slice_roundtrip_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(&leaf_grad([1, 1, 1, 2], vec![1.0, 2.0]));
        let b = tape.leaf(&leaf_grad([1, 2, 1, 2], vec![3.0, 4.0, 5.0, 6.0]));
        let cat = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(*tape.shape(cat), [1, 3, 1, 2]);
        assert_eq!(tape.value(cat), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        // keep only b's middle channel, loss = mean of it
        let mid = tape.slice_channels(cat, 1, 2).unwrap();
        let loss = tape.mean_all(mid);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(a).unwrap().iter().all(|&g| g == 0.0));
        assert_eq!(grads.get(b).unwrap(), &[0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn mul_chan_and_gate_values() {
        let mut tape = Tape::new();
        let x = tape.constant([1, 2, 1, 2], vec![1.0f64, 2.0, 3.0, 4.0]);
        let map = tape.constant([1, 1, 1, 2], vec![10.0, 100.0]);
        let y = tape.mul_chan(x, map).unwrap();
        assert_eq!(tape.value(y), &[10.0, 200.0, 30.0, 400.0]);

        let gate = tape.constant([1, 2, 1, 1], vec![2.0, -1.0]);
        let z = tape.mul_gate(x, gate).unwrap();
        assert_eq!(tape.value(z), &[2.0, 4.0, -3.0, -4.0]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut tape = Tape::new();
        let a = tape.constant([1, 1, 1, 2], vec![1.0f64, 2.0]);
        let b = tape.constant([1, 1, 2, 1], vec![1.0, 2.0]);
        assert!(matches!(
            tape.add(a, b),
            Err(Error::ShapeMismatch { op: "add", .. })
        ));
    }

    #[test]
    fn conv_channel_mismatch_is_reported() {
        let mut tape = Tape::new();
        let x = tape.constant([1, 3, 4, 4], vec![0.0f64; 48]);
        let w = tape.constant([2, 2, 3, 3], vec![0.0; 36]);
        let b = tape.constant([1, 2, 1, 1], vec![0.0; 2]);
        assert!(matches!(
            tape.conv2d(x, w, b, ConvMeta::new(1, 1, 1)),
            Err(Error::ChannelMismatch { op: "conv2d", .. })
        ));
    }
}
