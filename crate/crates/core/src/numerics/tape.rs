//! Reverse-mode differentiation over dense tensors.
//!
//! Every operation evaluates eagerly and appends a node to the [`Tape`].
//! Nodes only reference earlier nodes, so a single reverse sweep visits each
//! entry once. Fused operators (selective scan, sparse convolution) plug in
//! through [`CustomOp`].

use std::collections::HashMap;
use std::sync::Arc;

use super::params::ParamStore;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operator with a hand-written adjoint.
pub trait CustomOp<T: Real> {
    fn name(&self) -> &'static str;

    /// Gradient with respect to each input (same order as recorded), given
    /// the gradient of the output. `None` means "no contribution".
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>>;
}

pub(crate) enum Op<T: Real> {
    Leaf,
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Silu(Var),
    Softplus(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    SoftmaxRows(Var),
    CrossEntropy {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<i64>,
        count: usize,
    },
    Conv1d {
        x: Var,
        k: Var,
        pad_left: usize,
    },
    GatherRows {
        x: Var,
        idx: Arc<Vec<usize>>,
    },
    ScatterMean {
        x: Var,
        idx: Arc<Vec<usize>>,
        inv_counts: Vec<T>,
    },
    Transpose(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SumAll(Var),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
}

pub(crate) struct Node<T: Real> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) needs_grad: bool,
}

/// Record of a forward computation.
pub struct Tape<T: Real> {
    pub(crate) nodes: Vec<Node<T>>,
    params: Vec<(Var, String)>,
    bound: HashMap<String, Var>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; gradients are not propagated into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    /// Differentiable leaf that is not tied to a parameter store.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// Binds the named parameter of `store` as a leaf. Repeated binds of the
    /// same name on one tape return the same variable.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = store
            .value(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?
            .clone();
        let v = self.push_leaf(value, true);
        self.params.push((v, name.to_string()));
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Variable bound to parameter `name`, if any.
    pub fn bound(&self, name: &str) -> Option<Var> {
        self.bound.get(name).copied()
    }

    fn push_leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records a fused operator whose forward value has already been computed.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            inputs,
        )
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out = &self.nodes[output.0].value;
        if out.len() != 1 {
            return Err(Error::dim("backward", out.shape(), &[1]));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(out.shape(), T::one()));
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let contributions = super::ops::op_backward(self, node, &g);
            for (var, contrib) in contributions {
                if !self.nodes[var.0].needs_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Adds the gradients of every bound parameter into `store`, scaled by `weight`.
    pub fn accumulate(&self, grads: &Gradients<T>, store: &mut ParamStore<T>, weight: T) -> Result<()> {
        for (var, name) in &self.params {
            if let Some(g) = grads.get(*var) {
                store.accumulate_grad(name, g, weight)?;
            }
        }
        Ok(())
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}
