//! Tape-based reverse-mode automatic differentiation over [`TensorF`].
//!
//! A [`Graph`] records every primitive executed during a forward pass. Calling
//! [`Graph::backward`] replays the record in exact reverse order and
//! accumulates gradients into every node that (transitively) depends on a
//! parameter. A graph supports a single backward pass; build a new graph for
//! the next forward.
//!
//! ```
//! use randattn::autodiff::Graph;
//! use randattn::TensorF;
//!
//! let mut g = Graph::new();
//! let a = g.param(TensorF::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
//! let b = g.constant(TensorF::eye(2));
//! let c = g.matmul(a, b).unwrap();
//! let loss = g.sum_all(c).unwrap();
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(a).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
//! ```

pub mod gradcheck;
mod kernels;
mod ops;

pub use ops::{is_masked, MASK_SENTINEL};

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::TensorF;

/// Handle to a node recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    value: TensorF,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: ops::Op,
}

/// Record of executed primitives, in execution order.
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
    matmul_flops: u64,
    flop_tag: &'static str,
    tagged_flops: BTreeMap<&'static str, u64>,
    backward_trace: Vec<usize>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
            matmul_flops: 0,
            flop_tag: "other",
            tagged_flops: BTreeMap::new(),
            backward_trace: Vec::new(),
        }
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: TensorF) -> Var {
        self.push(value, true, ops::Op::Leaf)
    }

    /// Leaf that does not receive a gradient.
    pub fn constant(&mut self, value: TensorF) -> Var {
        self.push(value, false, ops::Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &TensorF {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last backward pass, if the node received one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-add FLOPs (counted as 2) executed by matmuls so far.
    pub fn matmul_flops(&self) -> u64 {
        self.matmul_flops
    }

    /// Sets the label that subsequent matmul FLOPs are attributed to
    /// (initially `"other"`) and returns the previous one.
    pub fn set_flop_tag(&mut self, tag: &'static str) -> &'static str {
        std::mem::replace(&mut self.flop_tag, tag)
    }

    /// Matmul FLOPs per tag.
    pub fn tagged_flops(&self) -> &BTreeMap<&'static str, u64> {
        &self.tagged_flops
    }

    /// Node indices visited by the last backward pass, in visit order.
    pub fn backward_trace(&self) -> &[usize] {
        &self.backward_trace
    }

    fn push(&mut self, value: TensorF, requires_grad: bool, op: ops::Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: TensorF, op: ops::Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, requires_grad, op)
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Backward(
                "graph already consumed by a backward pass; run a new forward".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        self.backward_trace.clear();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backward_trace.push(i);
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = ops::backward(self, i, &grad);
            self.nodes[i].grad = Some(grad);
            for (input, g) in contributions {
                self.accumulate(input, g);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, x)| *e += x),
            slot @ None => *slot = Some(g),
        }
    }
}
