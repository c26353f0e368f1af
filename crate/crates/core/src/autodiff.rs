//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] records every operation applied during a forward pass. Each
//! node keeps its value plus a boxed backward rule; [`Graph::backward`]
//! replays the tape in reverse and accumulates vector-Jacobian products.
//! Values are never mutated after they are recorded.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Read-only view handed to backward rules.
pub struct BackwardCtx<'a> {
    graph: &'a Graph,
    node: usize,
}

impl BackwardCtx<'_> {
    pub fn input(&self, i: usize) -> &Tensor {
        let v = self.graph.nodes[self.node].inputs[i];
        &self.graph.nodes[v.0].value
    }

    pub fn output(&self) -> &Tensor {
        &self.graph.nodes[self.node].value
    }

    pub fn wants_grad(&self, i: usize) -> bool {
        let v = self.graph.nodes[self.node].inputs[i];
        self.graph.nodes[v.0].requires_grad
    }
}

/// Vector-Jacobian product of one recorded op.
///
/// Returns one entry per input; `None` for inputs that need no gradient.
pub trait Backward: Send + Sync {
    fn backward(&self, ctx: &BackwardCtx<'_>, grad: &Tensor) -> Result<Vec<Option<Tensor>>>;
}

impl<F> Backward for F
where
    F: Fn(&BackwardCtx<'_>, &Tensor) -> Result<Vec<Option<Tensor>>> + Send + Sync,
{
    fn backward(&self, ctx: &BackwardCtx<'_>, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        self(ctx, grad)
    }
}

struct Node {
    op: &'static str,
    value: Tensor,
    inputs: Vec<Var>,
    rule: Option<Box<dyn Backward>>,
    requires_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    strict: bool,
    sign_flip: Option<String>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph in strict mode: any non-finite op output is an error.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            strict: true,
            sign_flip: None,
        }
    }

    pub fn with_strict(mut self, strict: bool) -> Self {
        self.strict = strict;
        self
    }

    /// Fault-injection hook: negates the backward rule of every op with this name.
    pub fn flip_gradient_sign(&mut self, op: impl Into<String>) {
        self.sign_flip = Some(op.into());
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf("constant", value, false)
    }

    /// Leaf that receives a gradient but is not tied to a named parameter.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push_leaf("variable", value, true)
    }

    /// Leaf bound to a named parameter; repeated lookups return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::Consistency(format!("parameter `{name}` is not registered")))?
            .clone();
        let v = self.push_leaf("param", value, true);
        self.params.insert(name.to_owned(), v);
        Ok(v)
    }

    /// Parameters bound so far, by name.
    pub fn bound_params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    fn push_leaf(&mut self, op: &'static str, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            inputs: Vec::new(),
            rule: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an op result. The backward rule is dropped when no input needs a gradient.
    pub fn push(
        &mut self,
        op: &'static str,
        value: Tensor,
        inputs: &[Var],
        rule: impl Backward + 'static,
    ) -> Result<Var> {
        if self.strict && !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            inputs: inputs.to_vec(),
            rule: requires_grad.then(|| Box::new(rule) as Box<dyn Backward>),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Gradients of a scalar output with respect to every node on the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar output, got shape {}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(loss_value.shape()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(rule) = node.rule.as_ref() else {
                continue;
            };
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let ctx = BackwardCtx { graph: self, node: idx };
            let mut input_grads = rule.backward(&ctx, &grad)?;
            if self.sign_flip.as_deref() == Some(node.op) {
                for g in input_grads.iter_mut().flatten() {
                    g.data_mut().iter_mut().for_each(|v| *v = -*v);
                }
            }
            if input_grads.len() != node.inputs.len() {
                return Err(Error::Consistency(format!(
                    "backward of `{}` returned {} gradients for {} inputs",
                    node.op,
                    input_grads.len(),
                    node.inputs.len()
                )));
            }
            for (input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                if g.shape() != self.nodes[input.0].value.shape() {
                    return Err(Error::Consistency(format!(
                        "backward of `{}` produced gradient {} for input {}",
                        node.op,
                        g.shape(),
                        self.nodes[input.0].value.shape()
                    )));
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    /// Gradient of a leaf; `None` when the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).and_then(|&v| self.get(v))
    }

    /// Gradients of every bound parameter that the output depends on.
    pub fn into_named(mut self) -> BTreeMap<String, Tensor> {
        let params = std::mem::take(&mut self.params);
        params
            .into_iter()
            .filter_map(|(name, v)| self.grads.get_mut(v.0).and_then(Option::take).map(|g| (name, g)))
            .collect()
    }
}
