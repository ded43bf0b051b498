//! Minimal dense-tensor core with reverse-mode differentiation.
//!
//! Tensors are immutable row-major buffers (`Arc`-shared) carrying an
//! optional attachment to a [`Tape`]. Ops that see at least one tracked
//! operand record a backward rule; everything else is plain arithmetic.
//! Image-like data uses N,C,H,W order throughout.

mod element;
mod gradcheck;
mod ops_conv;
mod ops_elem;
mod ops_linalg;
mod ops_norm;
mod ops_pool;
mod ops_reduce;
mod ops_shape;
mod ops_softmax;
mod tally;
mod tape;

pub use element::{Dtype, Element};
pub use gradcheck::{grad_check, grad_check_subset, GradCheckReport};
pub use ops_pool::PoolValidity;
pub use ops_softmax::AttnMask;
pub use tally::{tally_start, tally_take, with_class, MacClass, MacTally};
pub use tape::Tape;

use std::sync::Arc;

use crate::error::{Error, Result};
use tape::NodeRef;

/// Dense N-dimensional array, row-major.
pub struct Tensor<E: Element> {
    data: Arc<Vec<E>>,
    shape: Vec<usize>,
    node: Option<NodeRef<E>>,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            data: Arc::clone(&self.data),
            shape: self.shape.clone(),
            node: self.node.clone(),
        }
    }
}

impl<E: Element> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor<{:?}>(shape={:?}, tracked={})",
            E::DTYPE,
            self.shape,
            self.node.is_some()
        )
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<E: Element> Tensor<E> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        if numel_of(&shape) != data.len() {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                detail: format!("shape {:?} needs {} values, got {}", shape, numel_of(&shape), data.len()),
            });
        }
        Ok(Tensor {
            data: Arc::new(data),
            shape,
            node: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel_of(&shape);
        Tensor {
            data: Arc::new(vec![E::ZERO; n]),
            shape,
            node: None,
        }
    }

    pub fn full(shape: Vec<usize>, v: E) -> Self {
        let n = numel_of(&shape);
        Tensor {
            data: Arc::new(vec![v; n]),
            shape,
            node: None,
        }
    }

    pub fn scalar(v: E) -> Self {
        Tensor::full(vec![1], v)
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> E) -> Self {
        let n = numel_of(&shape);
        Tensor {
            data: Arc::new((0..n).map(&mut f).collect()),
            shape,
            node: None,
        }
    }

    /// Internal: wrap op output, running the debug-build finiteness sentinel.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<E>, node: Option<NodeRef<E>>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        debug_assert!(
            E::all_finite(&data),
            "non-finite value produced by a forward op (shape {:?})",
            shape
        );
        Tensor {
            data: Arc::new(data),
            shape,
            node,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<E>> {
        Arc::clone(&self.data)
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Element accessor for tests and small-scale inspection.
    pub fn at(&self, idx: &[usize]) -> E {
        assert_eq!(idx.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (i, (&ix, &ext)) in idx.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {} out of range at axis {}", ix, i);
            flat = flat * ext + ix;
        }
        self.data[flat]
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub(crate) fn node(&self) -> Option<&NodeRef<E>> {
        self.node.as_ref()
    }

    pub(crate) fn with_node(&self, tape: Tape<E>, id: usize) -> Self {
        Tensor {
            data: Arc::clone(&self.data),
            shape: self.shape.clone(),
            node: Some(NodeRef { tape, id }),
        }
    }

    /// Same data, no tape attachment.
    pub fn detach(&self) -> Self {
        Tensor {
            data: Arc::clone(&self.data),
            shape: self.shape.clone(),
            node: None,
        }
    }

    /// Gradient from this tensor's tape after `backward`, if any.
    pub fn grad(&self) -> Option<Tensor<E>> {
        self.node.as_ref().and_then(|n| n.tape.grad(self))
    }

    /// Lossless dtype conversion (f32 -> f64) or rounding (f64 -> f32);
    /// detaches from any tape.
    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor::from_op(
            self.shape.clone(),
            self.data.iter().map(|v| F::from_f64(v.to_f64())).collect(),
            None,
        )
    }

    pub fn max_abs_diff(&self, other: &Tensor<E>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn bit_eq(&self, other: &Tensor<E>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_f64().to_bits() == b.to_f64().to_bits())
    }
}

/// N,C,H,W accessors for 4-d image tensors.
impl<E: Element> Tensor<E> {
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        if self.shape.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "dims4",
                detail: format!("expected rank 4, got {:?}", self.shape),
            });
        }
        Ok((self.shape[0], self.shape[1], self.shape[2], self.shape[3]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f32>::from_vec(vec![2, 2], vec![1.0; 4]).is_ok());
    }

    #[test]
    fn at_indexes_row_major() {
        let t = Tensor::<f32>::from_vec(vec![2, 3], (0..6).map(|v| v as f32).collect()).unwrap();
        assert_eq!(t.at(&[0, 0]), 0.0);
        assert_eq!(t.at(&[0, 2]), 2.0);
        assert_eq!(t.at(&[1, 0]), 3.0);
        assert_eq!(t.at(&[1, 2]), 5.0);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let tape = Tape::<f64>::new();
        let x = tape.watch(&Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        let loss = x.sum_all().unwrap();
        tape.backward(&loss).unwrap();
        assert!(matches!(tape.backward(&loss), Err(crate::error::Error::TapeConsumed)));
    }

    #[test]
    fn recording_after_backward_is_an_error() {
        let tape = Tape::<f64>::new();
        let x = tape.watch(&Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        let loss = x.sum_all().unwrap();
        tape.backward(&loss).unwrap();
        assert!(x.add(&x).is_err());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.watch(&Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        assert!(matches!(
            tape.backward(&x),
            Err(crate::error::Error::NonScalarLoss(2))
        ));
    }

    #[test]
    fn unreachable_leaf_has_no_grad() {
        let tape = Tape::<f64>::new();
        let x = tape.watch(&Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        let y = tape.watch(&Tensor::from_vec(vec![2], vec![3.0, 4.0]).unwrap()).unwrap();
        let loss = x.sum_all().unwrap();
        tape.backward(&loss).unwrap();
        assert!(tape.grad(&x).is_some());
        assert!(tape.grad(&y).is_none());
    }
}
