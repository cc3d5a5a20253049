//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] records every executed operation together with the inputs its
//! backward rule needs. Leaves are either constants (`input`) or trainable
//! parameters (`param`). [`Tape::backward`] replays the recorded rules in
//! reverse order; only parameter leaves keep their gradients between calls,
//! so calling it twice accumulates exactly twice the gradient.

use crate::error::{Error, Result};
use crate::ops::{self, NormStats, Padding, Stride};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Input,
    Param,
    Conv3d {
        x: Var,
        w: Var,
        stride: Stride,
        padding: Padding,
    },
    Channelwise {
        x: Var,
        w: Var,
    },
    Pointwise {
        x: Var,
        w: Var,
    },
    Transposed {
        x: Var,
        w: Var,
    },
    InstanceNorm {
        x: Var,
        gain: Var,
        bias: Var,
        stats: NormStats<T>,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Softmax {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        k: T,
    },
    Sum {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Upsample2 {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    /// Scalar function of one input whose local gradient was evaluated
    /// during the forward pass.
    ScalarFn {
        x: Var,
        local_grad: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed operations.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a constant.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        let mut value = value;
        value.zero_grad();
        self.push(value, Op::Input, false)
    }

    /// Records a trainable leaf. Its gradient persists across backward calls.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        let mut value = value;
        value.zero_grad();
        self.push(value, Op::Param, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a parameter leaf, if any flowed into it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn conv3d(&mut self, x: Var, w: Var, stride: Stride, padding: Padding) -> Result<Var> {
        let y = ops::conv3d(self.value(x), self.value(w), stride, padding)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(y, Op::Conv3d { x, w, stride, padding }, rg))
    }

    pub fn channelwise_conv3d(&mut self, x: Var, w: Var) -> Result<Var> {
        let y = ops::channelwise_conv3d(self.value(x), self.value(w))?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(y, Op::Channelwise { x, w }, rg))
    }

    pub fn pointwise_conv3d(&mut self, x: Var, w: Var) -> Result<Var> {
        let y = ops::pointwise_conv3d(self.value(x), self.value(w))?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(y, Op::Pointwise { x, w }, rg))
    }

    pub fn transposed_conv3d(&mut self, x: Var, w: Var) -> Result<Var> {
        let y = ops::transposed_conv3d(self.value(x), self.value(w))?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(y, Op::Transposed { x, w }, rg))
    }

    pub fn instance_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (y, stats) = ops::instance_norm(self.value(x), self.value(gain), self.value(bias), eps)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(y, Op::InstanceNorm { x, gain, bias, stats }, rg))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let y = ops::leaky_relu(self.value(x), slope);
        let rg = self.rg(&[x]);
        self.push(y, Op::LeakyRelu { x, slope }, rg)
    }

    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let y = ops::softmax_channels(self.value(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(y, Op::Softmax { x }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, "operands", format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let y = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(y, Op::Add { a, b }, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let y = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(y, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let y = self.value(x).map(|v| v * k);
        let rg = self.rg(&[x]);
        self.push(y, Op::Scale { x, k }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(y, Op::Sum { x }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(y, Op::Reshape { x }, rg))
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let y = ops::upsample2(self.value(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(y, Op::Upsample2 { x }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let y = ops::concat(&tensors, axis)?;
        let rg = self.rg(parts);
        Ok(self.push(
            y,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Records a scalar `value = f(x)` together with `∂f/∂x` evaluated at `x`.
    pub fn scalar_fn(&mut self, x: Var, value: T, local_grad: Vec<T>) -> Result<Var> {
        if local_grad.len() != self.value(x).len() {
            return Err(Error::shape(
                "scalar_fn",
                "gradient",
                format!("{} entries for input of {}", local_grad.len(), self.value(x).len()),
            ));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(value), Op::ScalarFn { x, local_grad }, rg))
    }

    /// Back-propagates from a scalar `loss`, accumulating into parameter leaves.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        fn acc<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
            match &mut grads[v.0] {
                Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                slot => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Param) {
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            let node = &self.nodes[i];
            let needs = |v: &Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Input | Op::Param => {}
                Op::Conv3d { x, w, stride, padding } => {
                    let (gx, gw) =
                        ops::conv3d_backward(self.value(*x), self.value(*w), *stride, *padding, &g, needs(x))?;
                    if let Some(gx) = gx {
                        acc(&mut grads, *x, gx);
                    }
                    if needs(w) {
                        acc(&mut grads, *w, gw);
                    }
                }
                Op::Channelwise { x, w } => {
                    let (gx, gw) = ops::channelwise_conv3d_backward(self.value(*x), self.value(*w), &g, needs(x))?;
                    if let Some(gx) = gx {
                        acc(&mut grads, *x, gx);
                    }
                    if needs(w) {
                        acc(&mut grads, *w, gw);
                    }
                }
                Op::Pointwise { x, w } => {
                    let (gx, gw) = ops::pointwise_conv3d_backward(self.value(*x), self.value(*w), &g, needs(x))?;
                    if let Some(gx) = gx {
                        acc(&mut grads, *x, gx);
                    }
                    if needs(w) {
                        acc(&mut grads, *w, gw);
                    }
                }
                Op::Transposed { x, w } => {
                    let (gx, gw) = ops::transposed_conv3d_backward(self.value(*x), self.value(*w), &g, needs(x))?;
                    if let Some(gx) = gx {
                        acc(&mut grads, *x, gx);
                    }
                    if needs(w) {
                        acc(&mut grads, *w, gw);
                    }
                }
                Op::InstanceNorm { x, gain, bias, stats } => {
                    let (gx, gg, gb) = ops::instance_norm_backward(self.value(*x), self.value(*gain), stats, &g);
                    if needs(x) {
                        acc(&mut grads, *x, gx);
                    }
                    if needs(gain) {
                        acc(&mut grads, *gain, gg);
                    }
                    if needs(bias) {
                        acc(&mut grads, *bias, gb);
                    }
                }
                Op::LeakyRelu { x, slope } => {
                    let gx = self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(&v, &gv)| if v >= T::zero() { gv } else { *slope * gv })
                        .collect();
                    acc(&mut grads, *x, gx);
                }
                Op::Softmax { x } => {
                    let gx = ops::softmax_channels_backward(&node.value, &g);
                    acc(&mut grads, *x, gx);
                }
                Op::Add { a, b } => {
                    if needs(b) {
                        acc(&mut grads, *b, g.clone());
                    }
                    if needs(a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Mul { a, b } => {
                    if needs(a) {
                        let ga = g.iter().zip(self.value(*b).data()).map(|(&x, &y)| x * y).collect();
                        acc(&mut grads, *a, ga);
                    }
                    if needs(b) {
                        let gb = g.iter().zip(self.value(*a).data()).map(|(&x, &y)| x * y).collect();
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Scale { x, k } => {
                    let gx = g.iter().map(|&v| v * *k).collect();
                    acc(&mut grads, *x, gx);
                }
                Op::Sum { x } => {
                    let gx = vec![g[0]; self.value(*x).len()];
                    acc(&mut grads, *x, gx);
                }
                Op::Reshape { x } => acc(&mut grads, *x, g),
                Op::Upsample2 { x } => {
                    let gx = ops::upsample2_backward(self.value(*x).shape(), &g);
                    acc(&mut grads, *x, gx);
                }
                Op::Concat { parts, axis } => {
                    let shapes: Vec<Vec<usize>> = parts.iter().map(|&p| self.value(p).shape().to_vec()).collect();
                    let split = ops::concat_backward(&shapes, *axis, &g);
                    let parts = parts.clone();
                    for (p, gp) in parts.into_iter().zip(split) {
                        if self.nodes[p.0].requires_grad {
                            acc(&mut grads, p, gp);
                        }
                    }
                }
                Op::ScalarFn { x, local_grad } => {
                    let gx = local_grad.iter().map(|&v| v * g[0]).collect();
                    acc(&mut grads, *x, gx);
                }
            }
        }
        Ok(())
    }
}
