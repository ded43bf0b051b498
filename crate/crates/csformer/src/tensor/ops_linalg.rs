use rayon::prelude::*;

use super::tape::{common_tape, NodeRef};
use super::{tally, Element, Tensor};
use crate::error::{Error, Result};

/// c[M,N] += a[M,K] * b[K,N]. i-k-j loop order: the inner j loop walks
/// contiguous rows of b and c, which vectorizes well. Accumulation order over
/// k is fixed, so the result does not depend on the thread count.
pub(crate) fn mm_acc<E: Element>(c: &mut [E], a: &[E], b: &[E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let work = m * k * n;
    let body = |(i, crow): (usize, &mut [E])| {
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = aik.mul_add(bv, *cv);
            }
        }
    };
    if work >= 1 << 16 && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        c.chunks_mut(n).enumerate().for_each(body);
    }
}

/// c[M,N] += a[M,K] * b[N,K]^T.
pub(crate) fn mm_bt_acc<E: Element>(c: &mut [E], a: &[E], b: &[E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let work = m * k * n;
    let body = |(i, crow): (usize, &mut [E])| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = E::ZERO;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc = av.mul_add(bv, acc);
            }
            *cv += acc;
        }
    };
    if work >= 1 << 16 && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        c.chunks_mut(n).enumerate().for_each(body);
    }
}

/// c[K,N] += a[M,K]^T * b[M,N].
pub(crate) fn mm_at_acc<E: Element>(c: &mut [E], a: &[E], b: &[E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let crow = &mut c[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = av.mul_add(bv, *cv);
            }
        }
    }
}

impl<E: Element> Tensor<E> {
    /// Standard matrix product [M,K] x [K,N] -> [M,N].
    pub fn matmul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", sa, sb),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        tally::record((m * k * n) as u64);
        let mut data = vec![E::ZERO; m * n];
        mm_acc(&mut data, self.data(), other.data(), m, k, n);

        let node = match common_tape(&[self, other])? {
            None => None,
            Some((tape, ids)) => {
                let a = self.data_arc();
                let b = other.data_arc();
                let (wa, wb) = (ids[0].is_some(), ids[1].is_some());
                let parents: Vec<usize> = ids.into_iter().flatten().collect();
                let id = tape.push(
                    parents,
                    data.len(),
                    Some(Box::new(move |g| {
                        let mut out = Vec::new();
                        if wa {
                            let mut da = vec![E::ZERO; m * k];
                            mm_bt_acc(&mut da, g, &b, m, n, k);
                            out.push(da);
                        }
                        if wb {
                            let mut db = vec![E::ZERO; k * n];
                            mm_at_acc(&mut db, &a, g, m, k, n);
                            out.push(db);
                        }
                        out
                    })),
                )?;
                Some(NodeRef { tape, id })
            }
        };
        Ok(Tensor::from_op(vec![m, n], data, node))
    }

    /// Batched matrix product [B,M,K] x [B,K,N] -> [B,M,N]; with
    /// `transpose_b` the right operand is [B,N,K].
    pub fn bmm(&self, other: &Tensor<E>, transpose_b: bool) -> Result<Tensor<E>> {
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if transpose_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "bmm",
                detail: format!("{:?} x {:?} (transpose_b={})", sa, sb, transpose_b),
            });
        }
        let (bsz, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_b { sb[1] } else { sb[2] };
        tally::record((bsz * m * k * n) as u64);

        let a_all = self.data();
        let b_all = other.data();
        let mut data = vec![E::ZERO; bsz * m * n];
        data.par_chunks_mut(m * n).enumerate().for_each(|(bi, cb)| {
            let ab = &a_all[bi * m * k..(bi + 1) * m * k];
            let bb = &b_all[bi * k * n..(bi + 1) * k * n];
            if transpose_b {
                mm_bt_acc(cb, ab, bb, m, k, n);
            } else {
                mm_acc(cb, ab, bb, m, k, n);
            }
        });

        let node = match common_tape(&[self, other])? {
            None => None,
            Some((tape, ids)) => {
                let a = self.data_arc();
                let b = other.data_arc();
                let (wa, wb) = (ids[0].is_some(), ids[1].is_some());
                let parents: Vec<usize> = ids.into_iter().flatten().collect();
                let id = tape.push(
                    parents,
                    data.len(),
                    Some(Box::new(move |g| {
                        let mut out = Vec::new();
                        if wa {
                            let mut da = vec![E::ZERO; bsz * m * k];
                            da.par_chunks_mut(m * k).enumerate().for_each(|(bi, dab)| {
                                let gb = &g[bi * m * n..(bi + 1) * m * n];
                                let bb = &b[bi * k * n..(bi + 1) * k * n];
                                if transpose_b {
                                    // out = a b^T  =>  da = g b   (b is [N,K])
                                    mm_acc(dab, gb, bb, m, n, k);
                                } else {
                                    mm_bt_acc(dab, gb, bb, m, n, k);
                                }
                            });
                            out.push(da);
                        }
                        if wb {
                            let mut db = vec![E::ZERO; b.len()];
                            db.par_chunks_mut(if transpose_b { n * k } else { k * n })
                                .enumerate()
                                .for_each(|(bi, dbb)| {
                                    let gb = &g[bi * m * n..(bi + 1) * m * n];
                                    let ab = &a[bi * m * k..(bi + 1) * m * k];
                                    if transpose_b {
                                        // db = g^T a  (shape [N,K])
                                        mm_at_acc(dbb, gb, ab, m, n, k);
                                    } else {
                                        mm_at_acc(dbb, ab, gb, m, k, n);
                                    }
                                });
                            out.push(db);
                        }
                        out
                    })),
                )?;
                Some(NodeRef { tape, id })
            }
        };
        Ok(Tensor::from_op(vec![bsz, m, n], data, node))
    }

    /// Token-wise affine map: x[..., d] x w[d, e] (+ bias[e]). Leading axes
    /// are flattened into rows.
    pub fn linear(&self, w: &Tensor<E>, bias: Option<&Tensor<E>>) -> Result<Tensor<E>> {
        let sx = self.shape().to_vec();
        let sw = w.shape();
        let d = *sx.last().ok_or_else(|| Error::ShapeMismatch {
            op: "linear",
            detail: "rank-0 input".into(),
        })?;
        if sw.len() != 2 || sw[0] != d {
            return Err(Error::ShapeMismatch {
                op: "linear",
                detail: format!("x {:?} x w {:?}", sx, sw),
            });
        }
        let e = sw[1];
        if let Some(b) = bias {
            if b.shape() != [e] {
                return Err(Error::ShapeMismatch {
                    op: "linear",
                    detail: format!("bias {:?}, expected [{}]", b.shape(), e),
                });
            }
        }
        let rows = self.numel() / d;
        tally::record((rows * d * e) as u64);

        let mut data = vec![E::ZERO; rows * e];
        if let Some(b) = bias {
            let bd = b.data();
            for row in data.chunks_mut(e) {
                row.copy_from_slice(bd);
            }
        }
        mm_acc(&mut data, self.data(), w.data(), rows, d, e);
        let mut out_shape = sx.clone();
        *out_shape.last_mut().unwrap() = e;

        let operands: Vec<&Tensor<E>> = match bias {
            Some(b) => vec![self, w, b],
            None => vec![self, w],
        };
        let node = match common_tape(&operands)? {
            None => None,
            Some((tape, ids)) => {
                let x = self.data_arc();
                let wd = w.data_arc();
                let wants: Vec<bool> = ids.iter().map(|i| i.is_some()).collect();
                let parents: Vec<usize> = ids.into_iter().flatten().collect();
                let id = tape.push(
                    parents,
                    data.len(),
                    Some(Box::new(move |g| {
                        let mut out = Vec::new();
                        if wants[0] {
                            let mut dx = vec![E::ZERO; rows * d];
                            mm_bt_acc(&mut dx, g, &wd, rows, e, d);
                            out.push(dx);
                        }
                        if wants[1] {
                            let mut dw = vec![E::ZERO; d * e];
                            mm_at_acc(&mut dw, &x, g, rows, d, e);
                            out.push(dw);
                        }
                        if wants.len() > 2 && wants[2] {
                            let mut db = vec![E::ZERO; e];
                            for row in g.chunks(e) {
                                for (dbv, &gv) in db.iter_mut().zip(row) {
                                    *dbv += gv;
                                }
                            }
                            out.push(db);
                        }
                        out
                    })),
                )?;
                Some(NodeRef { tape, id })
            }
        };
        Ok(Tensor::from_op(out_shape, data, node))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_times_b_is_b() {
        let eye = Tensor::<f64>::from_fn(vec![3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let b = Tensor::<f64>::from_fn(vec![3, 2], |i| i as f64 - 2.0);
        assert!(eye.matmul(&b).unwrap().bit_eq(&b));
    }

    #[test]
    fn small_product_arithmetic() {
        let a = Tensor::<f64>::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f64>::from_vec(vec![2, 1], vec![5.0, 6.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::<f64>::from_fn(vec![4, 5], |_| rng.random::<f64>() - 0.5);
        let b = Tensor::<f64>::from_fn(vec![5, 3], |_| rng.random::<f64>() - 0.5);
        let c = a.matmul(&b).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let mut want = 0.0;
                for k in 0..5 {
                    want += a.at(&[i, k]) * b.at(&[k, j]);
                }
                assert!((c.at(&[i, j]) - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn bmm_transpose_matches_explicit_permute() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::<f64>::from_fn(vec![3, 4, 2], |_| rng.random::<f64>() - 0.5);
        let b = Tensor::<f64>::from_fn(vec![3, 5, 2], |_| rng.random::<f64>() - 0.5);
        let fast = a.bmm(&b, true).unwrap();
        let slow = a.bmm(&b.permute(&[0, 2, 1]).unwrap(), false).unwrap();
        assert!(fast.max_abs_diff(&slow) < 1e-12);
    }

    #[test]
    fn linear_bias_and_grads() {
        let tape = Tape::new();
        let x = tape
            .watch(&Tensor::from_vec(vec![2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let w = tape
            .watch(&Tensor::from_vec(vec![2, 1], vec![1.0f64, -1.0]).unwrap())
            .unwrap();
        let b = tape.watch(&Tensor::from_vec(vec![1], vec![0.5f64]).unwrap()).unwrap();
        let y = x.linear(&w, Some(&b)).unwrap();
        assert_eq!(y.data(), &[-0.5, -0.5]);
        let loss = y.sum_all().unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(tape.grad(&w).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(tape.grad(&b).unwrap().data(), &[2.0]);
        assert_eq!(tape.grad(&x).unwrap().data(), &[1.0, -1.0, 1.0, -1.0]);
    }
}
