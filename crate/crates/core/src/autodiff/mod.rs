//! Reverse-mode differentiation over a dynamically recorded tape.
//!
//! Every operation on a [`Var`] appends a node holding its value and a
//! closure that maps the output gradient to input gradients. Nodes are only
//! ever appended, so the tape is in topological order by construction and a
//! single reverse sweep in [`Tape::backward`] reaches every leaf.

mod gradcheck;
mod ops;

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

pub use gradcheck::{grad_check, grad_check_many};
pub use ops::{BatchNormStats, BnMode, TripletOutput};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Maps the output gradient to one optional gradient per input. The flags
/// say which inputs actually need one.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    op: &'static str,
    shape: Vec<usize>,
    value: Rc<Vec<f64>>,
    inputs: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
    /// Accumulated gradient; only kept for leaves.
    grad: Option<Vec<f64>>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        write!(f, "Var#{}({} {:?})", self.id, n.op, n.shape)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf. Gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    /// Records a leaf that always tracks gradients.
    pub fn param(&self, t: &Tensor) -> Var<'_> {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), true)
    }

    pub fn constant(&self, t: &Tensor) -> Var<'_> {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), false)
    }

    fn push_leaf(&self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: "leaf",
            shape,
            value: Rc::new(data),
            inputs: vec![],
            requires_grad,
            backward: None,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Appends a computed node. The backward rule is dropped when no input
    /// needs a gradient.
    pub(crate) fn push(
        &self,
        op: &'static str,
        shape: Vec<usize>,
        value: Vec<f64>,
        inputs: &[Var<'_>],
        backward: BackwardFn,
    ) -> Var<'_> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len(), "{op}");
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|v| nodes[v.id].requires_grad);
        nodes.push(Node {
            op,
            shape,
            value: Rc::new(value),
            inputs: inputs.iter().map(|v| v.id).collect(),
            requires_grad,
            backward: requires_grad.then_some(backward),
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Propagates d(loss)/d(node) to every leaf that requires a gradient.
    /// Leaf gradients accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        if self.is_empty() {
            return Err(Error::pre("backward", "empty tape"));
        }
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::pre("backward", "loss was recorded on another tape"));
        }
        let mut leaf_grads: Vec<(usize, Vec<f64>)> = Vec::new();
        {
            let nodes = self.nodes.borrow();
            let root = &nodes[loss.id];
            if root.value.len() != 1 {
                return Err(Error::pre(
                    "backward",
                    format!("loss must be scalar, got shape {:?}", root.shape),
                ));
            }
            let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
            grads[loss.id] = Some(vec![1.0]);
            for id in (0..=loss.id).rev() {
                let Some(g) = grads[id].take() else { continue };
                let node = &nodes[id];
                if !node.requires_grad {
                    continue;
                }
                let Some(rule) = &node.backward else {
                    leaf_grads.push((id, g));
                    continue;
                };
                let needs: Vec<bool> = node.inputs.iter().map(|&i| nodes[i].requires_grad).collect();
                let input_grads = rule(&g, &needs);
                debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", node.op);
                for ((&inp, gi), need) in node.inputs.iter().zip(input_grads).zip(&needs) {
                    let (Some(gi), true) = (gi, *need) else { continue };
                    debug_assert_eq!(gi.len(), nodes[inp].value.len(), "{} grad", node.op);
                    match &mut grads[inp] {
                        Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(gi),
                    }
                }
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in leaf_grads {
            match &mut nodes[id].grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    pub fn zero_grad(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    /// Accumulated gradient of a leaf, or `None` if it never received one.
    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.id];
        n.grad
            .as_ref()
            .map(|g| Tensor::new(&n.shape, g.clone()).expect("grad shape"))
    }

    /// Same as [`Tape::grad`] but zero-filled when absent.
    pub fn grad_or_zeros(&self, v: Var<'_>) -> Tensor {
        self.grad(v).unwrap_or_else(|| Tensor::zeros(&v.shape()))
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub(crate) fn data(&self) -> Rc<Vec<f64>> {
        Rc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    /// Copies the recorded value out, with the node's gradient if it has one.
    pub fn value(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        let mut t = Tensor::new(&n.shape, n.value.as_ref().clone()).expect("node shape");
        t.set_requires_grad(n.requires_grad);
        t.set_grad(n.grad.clone()).expect("grad shape");
        t
    }

    pub fn item(&self) -> f64 {
        let d = self.data();
        assert_eq!(d.len(), 1, "item() on non-scalar");
        d[0]
    }
}
