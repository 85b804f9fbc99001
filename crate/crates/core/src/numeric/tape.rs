//! Reverse-mode differentiation by operation recording.
//!
//! Every op appends a node holding its output value, the input handles and a
//! boxed vector-Jacobian product. [`Tape::backward`] walks the nodes once in
//! reverse order, so each recorded op contributes to each differentiable
//! input exactly once, and gradients are summed in a fixed order.

use super::{Scalar, Tensor};
use crate::error::{bail, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Inputs handed to a [`Backward`] implementation.
pub struct BackwardCtx<'a, T: Scalar> {
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    /// Upstream gradient, same length as `output`.
    pub grad: &'a [T],
    /// Which inputs need a gradient.
    pub needs: Vec<bool>,
}

/// Vector-Jacobian product of one recorded op.
pub trait Backward<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    /// One entry per input; `None` where `ctx.needs[i]` is false or the
    /// gradient is identically zero.
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Vec<T>>>>;
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    inputs: Vec<Var>,
    op: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf whose gradient is tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad();
        self.nodes.push(Node { value: tensor, inputs: Vec::new(), op: None, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Records the result of an op. The backward closure is dropped when no
    /// input requires a gradient.
    pub fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: Box<dyn Backward<T>>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, inputs: inputs.to_vec(), op: requires_grad.then_some(op), requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Reverse sweep from a scalar `loss`. The tape is left untouched, so
    /// calling this twice yields bit-identical gradients.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if loss.0 >= self.nodes.len() {
            bail!(Contract, "loss handle {} is not on this tape", loss.0);
        }
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            bail!(Contract, "backward needs a scalar loss, got shape {:?}", root.value.shape());
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = &node.op else { continue };
            let Some(grad) = grads[idx].take() else { continue };
            let ctx = BackwardCtx {
                inputs: node.inputs.iter().map(|v| &self.nodes[v.0].value).collect(),
                output: &node.value,
                grad: &grad,
                needs: node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect(),
            };
            let input_grads = op.backward(&ctx)?;
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", op.name());
            for (var, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                if g.len() != self.nodes[var.0].value.numel() {
                    bail!(
                        Dimension,
                        "{} produced a gradient of length {} for an input of {} elements",
                        op.name(),
                        g.len(),
                        self.nodes[var.0].value.numel()
                    );
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
            // keep the gradient of leaves only
            if node.op.is_some() {
                grads[idx] = None;
            }
        }
        for (idx, g) in grads.iter_mut().enumerate() {
            if self.nodes[idx].op.is_some() || !self.nodes[idx].requires_grad {
                *g = None;
            }
        }
        Ok(Grads { grads })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Grads<T: Scalar> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient of a leaf; `None` if it was not reached.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a leaf, or zeros of the given length when unreached.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<T> {
        self.get(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); len])
    }

    /// Accumulates a leaf gradient into `tensor.grad`.
    pub fn write_into(&self, v: Var, tensor: &mut Tensor<T>) -> Result<()> {
        match self.get(v) {
            Some(g) => tensor.accumulate_grad(g),
            None => Ok(()),
        }
    }
}
