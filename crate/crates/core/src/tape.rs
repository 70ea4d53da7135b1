//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! Every operation appends a node holding its forward value and, when any
//! input requires a gradient, a closure mapping the output gradient to input
//! gradients. [`Tape::backward`] walks the nodes in reverse recorded order.
//!
//! ```
//! use metaroute::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]));
//! let y = tape.mul(x, x).unwrap();
//! let loss = tape.sum(y);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Maps the output gradient to one optional gradient per parent. The flags
/// say which parents actually need one so expensive terms can be skipped.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + Send>;

struct Node {
    value: Tensor,
    requires_grad: bool,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    op: &'static str,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_vec(&self.shapes[v.0], g.clone()))
    }

    pub(crate) fn raw(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0)?.as_deref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of recorded operations (nodes with a backward rule).
    pub fn recorded_ops(&self) -> usize {
        self.nodes.iter().filter(|n| n.backward.is_some()).count()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_node(value, true, Vec::new(), None, "leaf")
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(value, false, Vec::new(), None, "constant")
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

    /// Earliest node holding a NaN or infinity, with the op that produced it.
    pub fn first_non_finite(&self) -> Option<(Var, &'static str)> {
        self.nodes
            .iter()
            .position(|n| !n.value.is_finite())
            .map(|i| (Var(i), self.nodes[i].op))
    }

    fn push_node(
        &mut self,
        value: Tensor,
        requires_grad: bool,
        parents: Vec<Var>,
        backward: Option<BackwardFn>,
        op: &'static str,
    ) -> Var {
        let mut value = value;
        value.grad = None;
        self.nodes.push(Node {
            value,
            requires_grad,
            parents,
            backward,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record an operation. The backward closure is dropped when no parent
    /// requires a gradient, so constant subgraphs cost nothing at backward.
    pub(crate) fn record<F>(&mut self, op: &'static str, value: Tensor, parents: &[Var], backward: F) -> Var
    where
        F: Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + Send + 'static,
    {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let backward: Option<BackwardFn> = if requires_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        self.push_node(value, requires_grad, parents.to_vec(), backward, op)
    }

    /// Backpropagate from a single-element node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = &self.nodes[output.0].value;
        if out.numel() != 1 {
            return Err(Error::dim(
                "backward",
                format!("output must hold one element, has shape {:?}", out.shape()),
            ));
        }
        self.backward_with(output, vec![1.0])
    }

    /// Backpropagate an explicit output gradient.
    pub fn backward_with(&self, output: Var, seed: Vec<f64>) -> Result<Gradients> {
        let n_out = self.nodes[output.0].value.numel();
        if seed.len() != n_out {
            return Err(Error::dim(
                "backward",
                format!("seed has {} values for an output of {n_out}", seed.len()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[output.0].requires_grad {
            grads[output.0] = Some(seed);
        }
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|p| self.nodes[p.0].requires_grad)
                .collect();
            let parent_grads = backward(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "op {}", node.op);
            for ((p, pg), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                if pg.iter().any(|v| v.is_nan()) {
                    return Err(Error::NumericInstability {
                        op: node.op.to_string(),
                        detail: "NaN in backward pass".into(),
                    });
                }
                match &mut grads[p.0] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}
