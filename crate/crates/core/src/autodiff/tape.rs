use std::cell::{Cell, Ref, RefCell};
use std::fmt;

use super::Tensor;
use crate::error::{Error, Result};

/// Kernel execution strategy for a tape.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ExecMode {
    /// Fixed-order reductions; identical graphs give bit-identical results.
    #[default]
    Deterministic,
    /// Row-parallel kernels; reductions depend on the thread count.
    Parallel,
}

/// Inputs to a node's local-gradient closure.
pub struct BackwardCtx<'a> {
    /// Parent values, in the order the node was recorded with.
    pub inputs: Vec<&'a Tensor>,
    /// Which parents need a gradient. Closures may return `None` for others.
    pub needs: Vec<bool>,
    pub output: &'a Tensor,
    /// Upstream gradient, same length as `output`.
    pub grad: &'a [f64],
    pub mode: ExecMode,
}

/// Returns one optional gradient per parent.
pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Define-by-run recording of tensor operations.
///
/// Nodes are appended in evaluation order, so parents always precede their
/// children and a single reverse sweep visits every node once.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    mode: ExecMode,
    consumed: Cell<bool>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .field("mode", &self.mode)
            .finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({}, shape={:?})", self.id, self.shape())
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        self.tape.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Copies the value out of the tape.
    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_mode(mode: ExecMode) -> Self {
        Tape {
            mode,
            ..Default::default()
        }
    }

    pub fn mode(&self) -> ExecMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records a trainable leaf.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
        })
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
        })
    }

    /// Handle for a node recorded earlier on this tape.
    pub fn var(&self, id: usize) -> Var<'_> {
        assert!(id < self.len(), "node {id} is not on this tape");
        Var { tape: self, id }
    }

    pub fn value(&self, var: Var<'_>) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[var.id].value)
    }

    /// Records an operation with an explicit local-gradient closure. The
    /// closure is dropped when no parent requires a gradient.
    pub fn custom<'t>(&'t self, parents: &[Var<'t>], value: Tensor, backward: BackwardFn) -> Var<'t> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        self.push(Node {
            value,
            parents: parents.iter().map(|p| p.id).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        })
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let shape = root.shape();
        if !shape.is_empty() {
            return Err(Error::NonScalarRoot(shape));
        }
        self.backward_with(root, Tensor::scalar(1.0))
    }

    /// Reverse sweep seeded with an explicit upstream gradient for `root`
    /// (a vector-Jacobian product). Each tape supports one sweep.
    pub fn backward_with(&self, root: Var<'_>, seed: Tensor) -> Result<Gradients> {
        if self.consumed.get() {
            return Err(Error::BackwardTwice);
        }
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if seed.shape() != root_node.value.shape() {
            return Err(Error::shape("backward", root_node.value.shape(), seed.shape()));
        }
        if !root_node.requires_grad {
            return Err(Error::NoGradient);
        }
        self.consumed.set(true);

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root.id] = Some(seed.into_data());
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let ctx = BackwardCtx {
                inputs: node.parents.iter().map(|&p| &nodes[p].value).collect(),
                needs,
                output: &node.value,
                grad: &grad,
                mode: self.mode,
            };
            let parent_grads = backward(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.len(), nodes[p].value.len());
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        // Only leaves keep their gradients; intermediates were taken above.
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Gradients of trainable leaves after a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Raw gradient for a leaf; `None` when the root does not depend on it.
    pub fn get(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id)?.as_deref()
    }

    /// Gradient for a leaf as a tensor, zero-filled when unreachable.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.wrt_id(var.id)
    }

    pub fn wrt_id(&self, id: usize) -> Tensor {
        let shape = self.shapes[id].clone();
        match &self.grads[id] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}
