//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive in execution order. Node inputs
//! always precede the node itself, so the record is already topologically
//! sorted and [`Graph::backward`] only has to walk it in reverse.

use super::conv::{self, ConvGeometry};
use super::norm;
use super::ops::{self, MatmulPlan};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a tensor recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Saved forward context of a recorded primitive.
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Permute { input: Var, axes: Vec<usize> },
    Concat { inputs: Vec<Var>, axis: usize },
    MatMul { a: Var, b: Var, plan: MatmulPlan },
    Softmax(Var),
    Conv2d { input: Var, kernel: Var, bias: Option<Var>, geom: ConvGeometry },
    MaxPool2 { input: Var, argmax: Vec<usize> },
    AvgPool { input: Var, size: usize },
    Upsample { input: Var, factor: usize },
    GroupNorm(Box<norm::GroupNormContext>),
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) requires_grad: bool,
    pub(crate) grad: Option<Tensor>,
    pub(crate) op: Op,
}

/// Append-only record of one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a tensor that gradients flow into.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Records a tensor treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward output with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    /// Records the result of a primitive. The saved context is dropped when
    /// no input needs a gradient, so inference passes keep only values.
    pub(crate) fn push(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Populates gradients of the scalar `output` on every ancestor that
    /// requires one. The saved forward context is released, so a second call
    /// on the same graph is rejected.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Usage(
                "backward already ran on this graph; re-run the forward pass".into(),
            ));
        }
        let out = &self.nodes[output.0];
        if out.value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar output, got shape {:?}",
                out.value.shape()
            )));
        }
        self.consumed = true;
        if !out.requires_grad {
            return Ok(());
        }
        let seed = Tensor::from_parts(out.value.shape().to_vec(), vec![1.0]);
        self.nodes[output.0].grad = Some(seed);

        for i in (0..=output.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            let op = std::mem::replace(&mut node.op, Op::Leaf);
            let Some(grad) = node.grad.as_ref() else {
                continue;
            };
            backward_op(op, &node.value, grad, before);
        }
        Ok(())
    }
}

/// Adds `delta` into the gradient of `v` when it takes part in differentiation.
pub(crate) fn accumulate(nodes: &mut [Node], v: Var, delta: Vec<f64>) {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return;
    }
    match node.grad.as_mut() {
        Some(g) => {
            for (a, d) in g.data_mut().iter_mut().zip(delta) {
                *a += d;
            }
        }
        None => node.grad = Some(Tensor::from_parts(node.value.shape().to_vec(), delta)),
    }
}

fn wants(nodes: &[Node], v: Var) -> bool {
    nodes[v.0].requires_grad
}

fn backward_op(op: Op, out: &Tensor, grad: &Tensor, nodes: &mut [Node]) {
    let g = grad.data();
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, a, g.to_vec());
            accumulate(nodes, b, g.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, a, g.to_vec());
            accumulate(nodes, b, g.iter().map(|x| -x).collect());
        }
        Op::Mul(a, b) => {
            if wants(nodes, a) {
                let d = zip_map(g, nodes[b.0].value.data(), |g, y| g * y);
                accumulate(nodes, a, d);
            }
            if wants(nodes, b) {
                let d = zip_map(g, nodes[a.0].value.data(), |g, x| g * x);
                accumulate(nodes, b, d);
            }
        }
        Op::Scale(a, c) => accumulate(nodes, a, g.iter().map(|x| x * c).collect()),
        Op::Relu(a) => {
            let d = zip_map(g, nodes[a.0].value.data(), |g, x| if x > 0.0 { g } else { 0.0 });
            accumulate(nodes, a, d);
        }
        Op::Sum(a) => {
            let n = nodes[a.0].value.numel();
            accumulate(nodes, a, vec![g[0]; n]);
        }
        Op::Mean(a) => {
            let n = nodes[a.0].value.numel();
            accumulate(nodes, a, vec![g[0] / n as f64; n]);
        }
        Op::Reshape(a) => accumulate(nodes, a, g.to_vec()),
        Op::Permute { input, axes } => {
            let d = ops::permute_backward(grad, &axes);
            accumulate(nodes, input, d);
        }
        Op::Concat { inputs, axis } => {
            let shapes: Vec<Vec<usize>> =
                inputs.iter().map(|v| nodes[v.0].value.shape().to_vec()).collect();
            for (v, d) in inputs.iter().zip(ops::concat_backward(grad, &shapes, axis)) {
                accumulate(nodes, *v, d);
            }
        }
        Op::MatMul { a, b, plan } => {
            let (da, db) = ops::matmul_backward(
                &plan,
                nodes[a.0].value.data(),
                nodes[b.0].value.data(),
                g,
                wants(nodes, a),
                wants(nodes, b),
            );
            if let Some(da) = da {
                accumulate(nodes, a, da);
            }
            if let Some(db) = db {
                accumulate(nodes, b, db);
            }
        }
        Op::Softmax(a) => accumulate(nodes, a, ops::softmax_backward(out, g)),
        Op::Conv2d {
            input,
            kernel,
            bias,
            geom,
        } => {
            let grads = conv::conv2d_backward(
                &geom,
                nodes[input.0].value.data(),
                nodes[kernel.0].value.data(),
                g,
                wants(nodes, input),
                wants(nodes, kernel),
            );
            if let Some(dx) = grads.input {
                accumulate(nodes, input, dx);
            }
            if let Some(dk) = grads.kernel {
                accumulate(nodes, kernel, dk);
            }
            if let Some(b) = bias {
                accumulate(nodes, b, conv::bias_backward(&geom, g));
            }
        }
        Op::MaxPool2 { input, argmax } => {
            let mut d = vec![0.0; nodes[input.0].value.numel()];
            for (o, &src) in argmax.iter().enumerate() {
                d[src] += g[o];
            }
            accumulate(nodes, input, d);
        }
        Op::AvgPool { input, size } => {
            let d = conv::avg_pool_backward(nodes[input.0].value.shape(), size, g);
            accumulate(nodes, input, d);
        }
        Op::Upsample { input, factor } => {
            let d = conv::upsample_backward(nodes[input.0].value.shape(), factor, g);
            accumulate(nodes, input, d);
        }
        Op::GroupNorm(ctx) => {
            let grads = norm::group_norm_backward(&ctx, nodes[ctx.gamma.0].value.data(), g);
            accumulate(nodes, ctx.input, grads.input);
            accumulate(nodes, ctx.gamma, grads.gamma);
            accumulate(nodes, ctx.beta, grads.beta);
        }
    }
}

pub(crate) fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}
