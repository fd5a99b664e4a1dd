//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards
//! visits every node after all of its consumers.

use super::ops;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Dense { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, padding: usize },
    Relu(Var),
    Sigmoid(Var),
    GlobalAvgPool(Var),
    GradReverse { x: Var, lambda: f64 },
    CrossEntropy { logits: Var, grad: Tensor },
    SquaredL2 { pred: Var, grad: Tensor },
    Add(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Adds a leaf (input or parameter). Non-finite values are rejected.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        t.ensure_finite("graph leaf")?;
        Ok(self.push(t, Op::Leaf))
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = ops::dense_forward(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        Ok(self.push(y, Op::Dense { x, w, b }))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let y = ops::conv2d_forward(self.value(x), self.value(w), self.value(b), stride, padding)?;
        Ok(self.push(
            y,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu_forward(self.value(x));
        self.push(y, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = ops::sigmoid_forward(self.value(x));
        self.push(y, Op::Sigmoid(x))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let y = ops::global_avg_pool_forward(self.value(x))?;
        Ok(self.push(y, Op::GlobalAvgPool(x)))
    }

    /// Identity forward; multiplies the gradient by `-lambda` backward.
    pub fn grad_reverse(&mut self, x: Var, lambda: f64) -> Result<Var> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "gradient reversal needs a finite lambda >= 0, got {lambda}"
            )));
        }
        let y = self.value(x).clone();
        Ok(self.push(y, Op::GradReverse { x, lambda }))
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, grad) = ops::cross_entropy_loss(self.value(logits), labels)?;
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, grad }))
    }

    pub fn squared_l2(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let (loss, grad) = ops::squared_l2_loss(self.value(pred), target)?;
        Ok(self.push(Tensor::scalar(loss), Op::SquaredL2 { pred, grad }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch(format!(
                "cannot add {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let y = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    /// Back-propagates from a scalar node with unit seed gradient.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "backward needs a scalar root, got {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            // inputs of a node always precede it on the tape
            let (lower, upper) = grads.split_at_mut(idx);
            let Some(g) = upper[0].as_ref() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Dense { x, w, b } => {
                    let (gx, gw, gb) = ops::dense_backward(self.value(*x), self.value(*w), g);
                    accumulate(lower, *x, gx);
                    accumulate(lower, *w, gw);
                    if let Some(b) = b {
                        accumulate(lower, *b, gb);
                    }
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    stride,
                    padding,
                } => {
                    let (gx, gw, gb) =
                        ops::conv2d_backward(self.value(*x), self.value(*w), g, *stride, *padding)?;
                    accumulate(lower, *x, gx);
                    accumulate(lower, *w, gw);
                    accumulate(lower, *b, gb);
                }
                Op::Relu(x) => accumulate(lower, *x, ops::relu_backward(self.value(*x), g)),
                Op::Sigmoid(x) => {
                    accumulate(lower, *x, ops::sigmoid_backward(&self.nodes[idx].value, g))
                }
                Op::GlobalAvgPool(x) => accumulate(
                    lower,
                    *x,
                    ops::global_avg_pool_backward(self.value(*x).shape(), g),
                ),
                Op::GradReverse { x, lambda } => {
                    // lambda = 0 blocks the path instead of adding signed zeros
                    if *lambda != 0.0 {
                        accumulate(lower, *x, scaled(g, -lambda));
                    }
                }
                Op::CrossEntropy { logits, grad } => {
                    accumulate(lower, *logits, scaled(grad, g.item()))
                }
                Op::SquaredL2 { pred, grad } => accumulate(lower, *pred, scaled(grad, g.item())),
                Op::Add(a, b) => {
                    accumulate(lower, *a, g.clone());
                    accumulate(lower, *b, g.clone());
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn scaled(t: &Tensor, s: f64) -> Tensor {
    if s == 1.0 {
        return t.clone();
    }
    let data = t.data().iter().map(|v| v * s).collect();
    Tensor::new(t.shape().to_vec(), data).expect("shape")
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Gradients of the root with respect to every node it depends on.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the root does not depend on `v`.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// The gradient of `v`, or zeros shaped like `like` when `v` is
    /// unreachable from the root.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}
