use super::tape::common_tape;
use super::{Element, Tensor};
use crate::error::Result;

impl<E: Element> Tensor<E> {
    /// Sum of all elements as a [1] tensor. Accumulates in f64 for stability;
    /// the summation order is fixed, so results are deterministic.
    pub fn sum_all(&self) -> Result<Tensor<E>> {
        let mut acc = 0.0f64;
        for v in self.data() {
            acc += v.to_f64();
        }
        let data = vec![E::from_f64(acc)];
        let node = match common_tape(&[self])? {
            None => None,
            Some((tape, ids)) => {
                let n = self.numel();
                let id = tape.push(
                    vec![ids[0].unwrap()],
                    1,
                    Some(Box::new(move |g| vec![vec![g[0]; n]])),
                )?;
                Some(super::tape::NodeRef { tape, id })
            }
        };
        Ok(Tensor::from_op(vec![1], data, node))
    }

    /// Mean of all elements as a [1] tensor.
    pub fn mean_all(&self) -> Result<Tensor<E>> {
        let n = self.numel();
        self.sum_all()?.scale(E::from_f64(1.0 / n as f64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn sum_grad_is_ones() {
        let tape = Tape::new();
        let x = tape
            .watch(&Tensor::from_vec(vec![3], vec![1.0f64, 2.0, 3.0]).unwrap())
            .unwrap();
        let loss = x.sum_all().unwrap();
        assert_eq!(loss.data()[0], 6.0);
        tape.backward(&loss).unwrap();
        assert_eq!(tape.grad(&x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn mean_all_divides() {
        let x = Tensor::from_vec(vec![4], vec![1.0f64, 3.0, 5.0, 7.0]).unwrap();
        assert_eq!(x.mean_all().unwrap().data()[0], 4.0);
    }
}
