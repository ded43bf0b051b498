use std::cell::RefCell;
use std::rc::Rc;

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Backward rule of one recorded op: maps the output gradient to one gradient
/// per recorded parent, in the order the parents were registered.
pub(crate) type BackwardFn<E> = Box<dyn Fn(&[E]) -> Vec<Vec<E>>>;

struct NodeRecord<E: Element> {
    parents: Vec<usize>,
    numel: usize,
    back: Option<BackwardFn<E>>,
}

struct TapeInner<E: Element> {
    nodes: Vec<NodeRecord<E>>,
    grads: Vec<Option<Vec<E>>>,
    consumed: bool,
}

/// Wengert tape. Ops append nodes in forward order, so reverse node order is
/// already a reverse topological order. A tape is single-use: after
/// `backward` it refuses further recording.
pub struct Tape<E: Element> {
    inner: Rc<RefCell<TapeInner<E>>>,
}

impl<E: Element> Clone for Tape<E> {
    fn clone(&self) -> Self {
        Tape {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                grads: Vec::new(),
                consumed: false,
            })),
        }
    }

    pub(crate) fn same_tape(&self, other: &Tape<E>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push(
        &self,
        parents: Vec<usize>,
        numel: usize,
        back: Option<BackwardFn<E>>,
    ) -> Result<usize> {
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::TapeConsumed);
        }
        let id = inner.nodes.len();
        inner.nodes.push(NodeRecord {
            parents,
            numel,
            back,
        });
        Ok(id)
    }

    /// Register `t` as a differentiable leaf on this tape.
    pub fn watch(&self, t: &Tensor<E>) -> Result<Tensor<E>> {
        let id = self.push(Vec::new(), t.numel(), None)?;
        Ok(t.with_node(self.clone(), id))
    }

    /// Reverse pass from a scalar loss. Populates per-node gradients which
    /// stay available through [`Tape::grad`]. Calling this twice on one tape
    /// is an error.
    pub fn backward(&self, loss: &Tensor<E>) -> Result<()> {
        let node = loss.node().ok_or(Error::LossNotOnTape)?;
        if !self.same_tape(&node.tape) {
            return Err(Error::TapeMismatch);
        }
        if loss.numel() != 1 {
            return Err(Error::NonScalarLoss(loss.numel()));
        }
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::TapeConsumed);
        }
        inner.consumed = true;

        let n = inner.nodes.len();
        let mut grads: Vec<Option<Vec<E>>> = vec![None; n];
        grads[node.id] = Some(vec![E::ONE]);

        for id in (0..=node.id).rev() {
            let Some(gout) = grads[id].as_ref() else {
                continue;
            };
            let rec = &inner.nodes[id];
            let Some(back) = rec.back.as_ref() else {
                continue;
            };
            debug_assert_eq!(gout.len(), rec.numel);
            let parent_grads = back(gout);
            debug_assert_eq!(parent_grads.len(), rec.parents.len());
            for (pid, pg) in rec.parents.clone().into_iter().zip(parent_grads) {
                debug_assert_eq!(pg.len(), inner.nodes[pid].numel);
                match &mut grads[pid] {
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&pg) {
                            *a += *g;
                        }
                    }
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        inner.grads = grads;
        Ok(())
    }

    /// Gradient of the last `backward` with respect to `t`, as a detached
    /// tensor. `None` if `t` was unreachable from the loss.
    pub fn grad(&self, t: &Tensor<E>) -> Option<Tensor<E>> {
        let node = t.node()?;
        if !self.same_tape(&node.tape) {
            return None;
        }
        let inner = self.inner.borrow();
        inner
            .grads
            .get(node.id)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::from_vec(t.shape().to_vec(), g.clone()).expect("grad shape"))
    }
}

/// Attachment of a tensor to a tape node.
pub(crate) struct NodeRef<E: Element> {
    pub tape: Tape<E>,
    pub id: usize,
}

impl<E: Element> Clone for NodeRef<E> {
    fn clone(&self) -> Self {
        NodeRef {
            tape: self.tape.clone(),
            id: self.id,
        }
    }
}

/// Resolve the common tape of an op's operands (if any is tracked), plus the
/// per-operand node ids. Errors if two operands live on different tapes.
pub(crate) fn common_tape<E: Element>(
    operands: &[&Tensor<E>],
) -> Result<Option<(Tape<E>, Vec<Option<usize>>)>> {
    let mut tape: Option<Tape<E>> = None;
    let mut ids = Vec::with_capacity(operands.len());
    for t in operands {
        match t.node() {
            Some(node) => {
                if let Some(existing) = &tape {
                    if !existing.same_tape(&node.tape) {
                        return Err(Error::TapeMismatch);
                    }
                } else {
                    tape = Some(node.tape.clone());
                }
                ids.push(Some(node.id));
            }
            None => ids.push(None),
        }
    }
    Ok(tape.map(|t| (t, ids)))
}
