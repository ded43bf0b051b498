use std::sync::Arc;

use super::tape::{common_tape, NodeRef};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Validity restriction for spatial pooling on padded feature maps: `map` is
/// a row-major H*W keep mask and `count` the number of kept positions.
#[derive(Clone)]
pub struct PoolValidity {
    pub map: Arc<Vec<bool>>,
    pub count: usize,
}

impl<E: Element> Tensor<E> {
    /// Per-channel spatial mean of a [N,C,H,W] tensor -> [N,C,1,1].
    pub fn global_avg_pool(&self) -> Result<Tensor<E>> {
        self.avg_pool_valid(None)
    }

    /// Spatial mean over valid positions only. With `None` every position is
    /// valid. The gradient distributes 1/count to the valid positions.
    pub fn avg_pool_valid(&self, validity: Option<&PoolValidity>) -> Result<Tensor<E>> {
        let (n, c, h, w) = self.dims4()?;
        let hw = h * w;
        if let Some(v) = validity {
            if v.map.len() != hw || v.count == 0 || v.count > hw {
                return Err(Error::ShapeMismatch {
                    op: "avg_pool_valid",
                    detail: format!("validity of {} for {}x{} map", v.map.len(), h, w),
                });
            }
        }
        let count = validity.map_or(hw, |v| v.count);
        let inv = E::from_f64(1.0 / count as f64);
        let map = validity.map(|v| Arc::clone(&v.map));

        let x = self.data();
        let mut out = vec![E::ZERO; n * c];
        for (plane_idx, o) in out.iter_mut().enumerate() {
            let plane = &x[plane_idx * hw..(plane_idx + 1) * hw];
            let mut acc = E::ZERO;
            match &map {
                None => {
                    for &v in plane {
                        acc += v;
                    }
                }
                Some(m) => {
                    for (i, &v) in plane.iter().enumerate() {
                        if m[i] {
                            acc += v;
                        }
                    }
                }
            }
            *o = acc * inv;
        }

        let node = match common_tape(&[self])? {
            None => None,
            Some((tape, ids)) => {
                let id = tape.push(
                    vec![ids[0].unwrap()],
                    out.len(),
                    Some(Box::new(move |g| {
                        let mut dx = vec![E::ZERO; n * c * hw];
                        for (plane_idx, &gv) in g.iter().enumerate() {
                            let share = gv * inv;
                            let plane = &mut dx[plane_idx * hw..(plane_idx + 1) * hw];
                            match &map {
                                None => plane.fill(share),
                                Some(m) => {
                                    for (i, v) in plane.iter_mut().enumerate() {
                                        if m[i] {
                                            *v = share;
                                        }
                                    }
                                }
                            }
                        }
                        vec![dx]
                    })),
                )?;
                Some(NodeRef { tape, id })
            }
        };
        Ok(Tensor::from_op(vec![n, c, 1, 1], out, node))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn constant_input_pools_to_constant() {
        let x = Tensor::<f64>::full(vec![2, 3, 4, 4], 2.5);
        let y = x.global_avg_pool().unwrap();
        assert_eq!(y.shape(), &[2, 3, 1, 1]);
        assert!(y.data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn small_arithmetic_case() {
        let x = Tensor::<f64>::from_vec(vec![1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        assert_eq!(x.global_avg_pool().unwrap().data()[0], 4.0);
    }

    #[test]
    fn gradient_distributes_inverse_area() {
        let tape = Tape::new();
        let x = tape.watch(&Tensor::<f64>::full(vec![1, 1, 2, 2], 1.0)).unwrap();
        let loss = x.global_avg_pool().unwrap().sum_all().unwrap();
        tape.backward(&loss).unwrap();
        assert!(tape
            .grad(&x)
            .unwrap()
            .data()
            .iter()
            .all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn validity_restricts_mean_and_grad() {
        let tape = Tape::new();
        let x = tape
            .watch(&Tensor::<f64>::from_vec(vec![1, 1, 2, 2], vec![1.0, 100.0, 3.0, 100.0]).unwrap())
            .unwrap();
        let validity = PoolValidity {
            map: Arc::new(vec![true, false, true, false]),
            count: 2,
        };
        let y = x.avg_pool_valid(Some(&validity)).unwrap();
        assert_eq!(y.data()[0], 2.0);
        let loss = y.sum_all().unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(tape.grad(&x).unwrap().data(), &[0.5, 0.0, 0.5, 0.0]);
    }
}
