//! Dense f64 tensors with define-by-run reverse-mode differentiation.
//!
//! Each operation builds a fresh node holding its output data, handles to
//! its parents, and a closure computing the vector-Jacobian product. The
//! graph lives only for the duration of one forward pass; `backward` on a
//! scalar walks it in reverse topological order and accumulates gradients
//! into every node that requires them.

pub mod ops;

pub mod gradcheck;

pub use gradcheck::{grad_check, grad_check_multi, GradCheckReport};

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Gradient rule: given the finished node and the upstream gradient,
/// return one gradient contribution per parent (in parent order).
type BackwardFn = Box<dyn Fn(&Node, &[f64]) -> Vec<Vec<f64>>>;

pub(crate) struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// A handle to one value in the computation graph. Cloning is cheap and
/// aliases the same node; data is immutable once the node is built.
#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

impl Tensor {
    // ── construction ────────────────────────────────────────────────

    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} holds {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor construction"));
        }
        Ok(Tensor::leaf(shape, data, false))
    }

    /// Leaf that participates in gradient computation.
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::from_vec(shape, data)?;
        Ok(Tensor {
            node: Rc::new(Node {
                requires_grad: true,
                ..Rc::try_unwrap(t.node).ok().expect("fresh node")
            }),
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let numel = shape.iter().product();
        Tensor::leaf(shape, vec![0.0; numel], false)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::leaf(vec![1], vec![v], false)
    }

    pub(crate) fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                parents,
                backward: if requires_grad { Some(backward) } else { None },
            }),
        }
    }

    // ── accessors ───────────────────────────────────────────────────

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.node.data
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    /// Rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.node.shape[0]
    }

    /// Columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.node.shape[1]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.node.data[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    pub fn is_finite(&self) -> bool {
        self.node.data.iter().all(|v| v.is_finite())
    }

    /// Detach into a plain constant leaf (same data, no graph history).
    pub fn detach(&self) -> Tensor {
        Tensor::leaf(self.node.shape.clone(), self.node.data.clone(), false)
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar. Gradients accumulate into every
    /// node with `requires_grad` until cleared with `zero_grad`.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.node.shape.clone()));
        }

        let order = self.topo_order();
        // Per-sweep buffers; accumulated into persistent grads at the end
        // so repeated backward calls add exactly one sweep each.
        let mut buf: HashMap<u64, Vec<f64>> = HashMap::new();
        buf.insert(self.node.id, vec![1.0]);

        for t in order.iter().rev() {
            let node = &*t.node;
            let Some(d_out) = buf.remove(&node.id) else {
                continue;
            };
            if let Some(rule) = &node.backward {
                let contribs = rule(node, &d_out);
                debug_assert_eq!(contribs.len(), node.parents.len());
                for (parent, c) in node.parents.iter().zip(contribs) {
                    if !parent.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(c.len(), parent.numel());
                    let slot = buf
                        .entry(parent.node.id)
                        .or_insert_with(|| vec![0.0; parent.numel()]);
                    for (s, v) in slot.iter_mut().zip(&c) {
                        *s += v;
                    }
                }
            }
            if node.requires_grad {
                let mut grad = node.grad.borrow_mut();
                match grad.as_mut() {
                    Some(g) => {
                        for (gi, di) in g.iter_mut().zip(&d_out) {
                            *gi += di;
                        }
                    }
                    None => *grad = Some(d_out),
                }
            }
        }
        Ok(())
    }

    /// Nodes reachable from `self` through parents, parents first.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: HashMap<u64, ()> = HashMap::new();
        // Iterative post-order DFS: (tensor, expanded?)
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if visited.contains_key(&t.node.id) {
                continue;
            }
            visited.insert(t.node.id, ());
            stack.push((t.clone(), true));
            for p in &t.node.parents {
                if p.requires_grad() && !visited.contains_key(&p.node.id) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}
