use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one recorded op.
///
/// `needs[i]` tells whether input `i` participates in differentiation; the op
/// may return `None` for inputs that do not.
pub trait Backward<S: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        output: &Tensor<S>,
        grad: &Tensor<S>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<S>>>;
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    inputs: Vec<NodeId>,
    op: Option<Box<dyn Backward<S>>>,
    requires_grad: bool,
}

/// Append-only tape. Nodes are pushed in evaluation order, so reverse index
/// order is a valid reverse topological order and the graph is acyclic by
/// construction.
pub struct Graph<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    consumed: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one reverse sweep, indexed by node.
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<S>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, inputs: Vec::new(), op: None, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.leaf(value, false)
    }

    /// Records the result of an op. The node requires grad iff any input does;
    /// otherwise the backward closure is dropped immediately.
    pub fn push(&mut self, value: Tensor<S>, inputs: &[NodeId], op: Box<dyn Backward<S>>) -> NodeId {
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        let op = if requires_grad { Some(op) } else { None };
        self.nodes.push(Node { value, inputs: inputs.to_vec(), op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Reverse sweep from a scalar loss. A graph may be differentiated this way
    /// only once; build a fresh forward pass for the next step.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients<S>> {
        if self.consumed {
            return Err(Error::Graph("backward called twice on the same forward pass".into()));
        }
        let value = self.value(loss);
        if value.numel() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                value.shape()
            )));
        }
        let seed = Tensor::full(value.shape(), S::one());
        let grads = self.sweep(loss, seed)?;
        self.consumed = true;
        Ok(grads)
    }

    /// Vector-Jacobian product `cotangentᵀ · ∂output/∂leaves`. Unlike
    /// [`Graph::backward`] this leaves the tape reusable, so several probes can
    /// share one forward pass.
    pub fn vjp(&self, output: NodeId, cotangent: Tensor<S>) -> Result<Gradients<S>> {
        if cotangent.shape() != self.value(output).shape() {
            return Err(Error::shape(
                "vjp",
                format!(
                    "cotangent {:?} does not match output {:?}",
                    cotangent.shape(),
                    self.value(output).shape()
                ),
            ));
        }
        self.sweep(output, cotangent)
    }

    fn sweep(&self, output: NodeId, seed: Tensor<S>) -> Result<Gradients<S>> {
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[output.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = node.op.as_ref() else { continue };
            let Some(grad) = grads[idx].take() else { continue };
            let inputs: Vec<&Tensor<S>> = node.inputs.iter().map(|i| &self.nodes[i.0].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|i| self.nodes[i.0].requires_grad).collect();
            let input_grads = op.backward(&inputs, &node.value, &grad, &needs);
            if input_grads.len() != node.inputs.len() {
                return Err(Error::Graph(format!(
                    "{} returned {} gradients for {} inputs",
                    op.name(),
                    input_grads.len(),
                    node.inputs.len()
                )));
            }
            for ((&input, g), &need) in node.inputs.iter().zip(input_grads).zip(&needs) {
                let (Some(g), true) = (g, need) else { continue };
                if g.shape() != self.nodes[input.0].value.shape() {
                    return Err(Error::Graph(format!(
                        "{} produced gradient {:?} for input {:?}",
                        op.name(),
                        g.shape(),
                        self.nodes[input.0].value.shape()
                    )));
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        // Interior gradients were taken as they were propagated; only leaves keep theirs.
        Ok(Gradients { grads })
    }
}
