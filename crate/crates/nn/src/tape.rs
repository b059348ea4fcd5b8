use crate::{NnError, Scalar, Tensor};

/// Forward-pass mode. Eval uses running batch-norm statistics and makes
/// dropout the identity.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a node on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// Arguments handed to an operation's backward closure.
pub(crate) struct BwdCtx<'a, T: Scalar> {
    pub grad: &'a Tensor<T>,
    pub parents: &'a [&'a Tensor<T>],
    #[allow(dead_code)]
    pub value: &'a Tensor<T>,
    /// Which parent slots actually need a gradient; expensive ops may
    /// return `None` for the others.
    pub needs: &'a [bool],
}

pub(crate) type BackwardFn<T> = Box<dyn Fn(&BwdCtx<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Scalar> {
    value: Tensor<T>,
    parents: Vec<NodeId>,
    needs_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// Record of one forward pass: node values plus the closures that run the
/// pass backwards. Operations append nodes in topological order, so a
/// single reverse sweep visits every node exactly once.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    checked: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            checked: false,
        }
    }

    /// A tape that scans every produced value and aborts with the producing
    /// operation's name on the first non-finite intermediate.
    pub fn checked() -> Self {
        Tape {
            nodes: Vec::new(),
            checked: true,
        }
    }

    /// Differentiable input node (parameters, inputs under test).
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            needs_grad: true,
            backward: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Non-differentiable input node; no gradient is ever computed for it.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            needs_grad: false,
            backward: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(
        &mut self,
        op: &'static str,
        value: Tensor<T>,
        parents: Vec<NodeId>,
        backward: BackwardFn<T>,
    ) -> Result<NodeId, NnError> {
        if self.checked && !value.all_finite() {
            return Err(NnError::NonFinite { op });
        }
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            parents,
            needs_grad,
            backward: if needs_grad { Some(backward) } else { None },
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar `loss` node. Returns gradients for every
    /// leaf reachable from the loss; interior gradients are freed as soon as
    /// they have been propagated.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>, NnError> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.len() != 1 {
            return Err(NnError::NonScalarLoss {
                shape: loss_node.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(loss_node.value.shape(), T::one()));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue; // leaf or constant: keep any accumulated gradient
            };
            let Some(grad) = grads[id].take() else {
                continue; // not reachable from the loss
            };
            let parent_values: Vec<&Tensor<T>> =
                node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|p| self.nodes[p.0].needs_grad)
                .collect();
            let ctx = BwdCtx {
                grad: &grad,
                parents: &parent_values,
                value: &node.value,
                needs: &needs,
            };
            let parent_grads = (backward)(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                if !self.nodes[parent.0].needs_grad {
                    continue;
                }
                let pg = pg.expect("backward returned None for a parent that needs a gradient");
                match grads[parent.0].as_mut() {
                    Some(acc) => acc.add_assign(&pg),
                    None => grads[parent.0] = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Result of [`Tape::backward`]: per-node gradient slots. Nodes that were
/// never reached hold `None` (their gradient is identically zero).
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}
