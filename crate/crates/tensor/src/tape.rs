//! Wengert-list autodiff. Every op appends a node holding its output value
//! and enough context to apply the chain rule; [`Tape::backward`] walks the
//! list once in reverse.

use crate::element::Element;
use crate::error::{shape_err, Result, TensorError};
use crate::ops::{self, Conv2dParams, NormStats};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, p: Conv2dParams },
    Upsample { x: Var, scale: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: NormStats<T> },
    Gelu { x: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Sum { x: Var },
    GlobalAvgPool { x: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input or parameter. Its `requires_grad` flag decides whether
    /// backward populates a gradient for it.
    pub fn leaf(&mut self, mut value: Tensor<T>) -> Var {
        value.grad = None;
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    /// Moves the recorded value (and gradient, if any) out of the tape.
    pub fn take(&mut self, v: Var) -> Tensor<T> {
        let node = &mut self.nodes[v.0].value;
        let shape = node.shape().to_vec();
        std::mem::replace(node, Tensor::zeros(shape))
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, mut value: Tensor<T>, op: Op<T>, inputs: &[Var], name: &'static str) -> Result<Var> {
        value.check_finite(name)?;
        value.requires_grad = inputs.iter().any(|&v| self.requires_grad(v));
        Ok(self.push(value, op))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, p: Conv2dParams) -> Result<Var> {
        let out = ops::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), p)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push_op(out, Op::Conv2d { x, w, b, p }, &inputs, "conv2d")
    }

    pub fn upsample(&mut self, x: Var, scale: usize) -> Result<Var> {
        let out = ops::upsample_bilinear(self.value(x), scale)?;
        self.push_op(out, Op::Upsample { x, scale }, &[x], "upsample")
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (out, stats) = ops::layer_norm(self.value(x), self.value(gamma), self.value(beta), T::from_f64(eps))?;
        self.push_op(out, Op::LayerNorm { x, gamma, beta, stats }, &[x, gamma, beta], "layer_norm")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = ops::gelu(self.value(x));
        self.push_op(out, Op::Gelu { x }, &[x], "gelu")
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = ops::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push_op(out, Op::Linear { x, w, b }, &inputs, "linear")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        self.push_op(out, Op::Add { a, b }, &[a, b], "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::mul(self.value(a), self.value(b))?;
        self.push_op(out, Op::Mul { a, b }, &[a, b], "mul")
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push_op(Tensor::scalar(s), Op::Sum { x }, &[x], "sum")
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = ops::global_avg_pool(self.value(x))?;
        self.push_op(out, Op::GlobalAvgPool { x }, &[x], "global_avg_pool")
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::softmax_cross_entropy(self.value(logits), labels)?;
        let op = Op::CrossEntropy { logits, labels: labels.to_vec(), probs };
        self.push_op(Tensor::scalar(loss), op, &[logits], "softmax_cross_entropy")
    }

    /// Clears every gradient so that backward may run again.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.grad = None;
        }
        self.backward_done = false;
    }

    /// Reverse sweep from a scalar loss. Gradients are accumulated on every
    /// node that requires grad; leaves keep them for inspection.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        if !lv.requires_grad {
            return Err(TensorError::DetachedGraph);
        }
        self.backward_done = true;
        self.nodes[loss.0].value.grad = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = self.nodes[idx].value.grad.as_ref() else { continue };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let grad_out = Tensor::from_vec(self.nodes[idx].value.shape().to_vec(), g.clone())?;
            let contributions = self.local_grads(idx, &grad_out)?;
            for (v, g) in contributions {
                self.accumulate(v, g)?;
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor<T>) -> Result<()> {
        let node = &mut self.nodes[v.0].value;
        if !node.requires_grad {
            return Ok(());
        }
        if g.shape() != node.shape() {
            return shape_err("backward", format!("gradient {:?} for value {:?}", g.shape(), node.shape()));
        }
        match node.grad.as_mut() {
            Some(acc) => acc.iter_mut().zip(g.data()).for_each(|(a, &b)| *a = *a + b),
            None => node.grad = Some(g.into_data()),
        }
        Ok(())
    }

    fn local_grads(&self, idx: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let rg = |v: Var| self.requires_grad(v);
        let mut out = Vec::new();
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, p } => {
                let need = [rg(*x), rg(*w), b.is_some_and(rg)];
                let grads = ops::conv2d_backward(self.value(*x), self.value(*w), g, *p, need)?;
                out.extend(grads.input.map(|t| (*x, t)));
                out.extend(grads.weight.map(|t| (*w, t)));
                if let (Some(b), Some(t)) = (b, grads.bias) {
                    out.push((*b, t));
                }
            }
            Op::Upsample { x, scale } => {
                out.push((*x, ops::upsample_bilinear_backward(self.value(*x).shape(), g, *scale)?));
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let (gx, gg, gb) = ops::layer_norm_backward(self.value(*x), self.value(*gamma), stats, g)?;
                out.extend([(*x, gx), (*gamma, gg), (*beta, gb)]);
            }
            Op::Gelu { x } => out.push((*x, ops::gelu_backward(self.value(*x), g))),
            Op::Linear { x, w, b } => {
                let need = [rg(*x), rg(*w), b.is_some_and(rg)];
                let (gx, gw, gb) = ops::linear_backward(self.value(*x), self.value(*w), g, need)?;
                out.extend(gx.map(|t| (*x, t)));
                out.extend(gw.map(|t| (*w, t)));
                if let (Some(b), Some(t)) = (b, gb) {
                    out.push((*b, t));
                }
            }
            Op::Add { a, b } => {
                out.push((*a, g.detached()));
                out.push((*b, g.detached()));
            }
            Op::Mul { a, b } => {
                out.push((*a, ops::mul(g, self.value(*b))?));
                out.push((*b, ops::mul(g, self.value(*a))?));
            }
            Op::Sum { x } => {
                let gv = g.data()[0];
                out.push((*x, Tensor::full(self.value(*x).shape().to_vec(), gv)));
            }
            Op::GlobalAvgPool { x } => {
                out.push((*x, ops::global_avg_pool_backward(self.value(*x).shape(), g)?));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let shape = self.value(*logits).shape();
                out.push((*logits, ops::softmax_cross_entropy_backward(shape, probs, labels, g.data()[0])?));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(vec![2, 3], |i| i as f64).with_grad());
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn square_gradient_at_three() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0).with_grad());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn fan_out_accumulates_three_branches() {
        // loss = sum(x + x) + sum(x * c): d/dx = 2 + c
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(vec![3], vec![1.0, -2.0, 0.5]).unwrap().with_grad());
        let c = tape.leaf(Tensor::from_vec(vec![3], vec![4.0, 5.0, 6.0]).unwrap());
        let twice = tape.add(x, x).unwrap();
        let scaled = tape.mul(x, c).unwrap();
        let both = tape.add(twice, scaled).unwrap();
        let s = tape.sum(both).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0, 7.0, 8.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(vec![2]).with_grad());
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss(_))));

        let c = tape.leaf(Tensor::ones(vec![2]));
        let s = tape.sum(c).unwrap();
        assert!(matches!(tape.backward(s), Err(TensorError::DetachedGraph)));

        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(TensorError::BackwardTwice)));
        tape.reset_grads();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);
    }
}
