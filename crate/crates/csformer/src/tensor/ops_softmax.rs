use std::sync::Arc;

use super::tape::{common_tape, NodeRef};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Boolean keep/exclude attention mask shared by the windows of one stage:
/// `keep[(w*L + q)*L + k]` says whether query token q of window w may attend
/// to key token k. Excluded pairs get exactly zero attention weight.
#[derive(Clone)]
pub struct AttnMask {
    keep: Arc<Vec<bool>>,
    pub windows: usize,
    pub seq: usize,
}

impl AttnMask {
    pub fn new(keep: Vec<bool>, windows: usize, seq: usize) -> Self {
        assert_eq!(keep.len(), windows * seq * seq, "mask size mismatch");
        AttnMask {
            keep: Arc::new(keep),
            windows,
            seq,
        }
    }

    /// All-keep mask (useful as a degenerate case in tests).
    pub fn all_keep(windows: usize, seq: usize) -> Self {
        AttnMask::new(vec![true; windows * seq * seq], windows, seq)
    }

    pub fn keep(&self, window: usize, q: usize, k: usize) -> bool {
        self.keep[(window * self.seq + q) * self.seq + k]
    }

    pub fn keep_row(&self, window: usize, q: usize) -> &[bool] {
        &self.keep[(window * self.seq + q) * self.seq..][..self.seq]
    }
}

impl<E: Element> Tensor<E> {
    /// Row-wise softmax over the last axis of a [B,L,L] logits tensor.
    ///
    /// With a mask, the batch axis must factor as B = N * windows * heads
    /// (window-major over heads); excluded keys receive exactly zero weight
    /// and each row renormalizes over its kept set. A fully-masked row is an
    /// error.
    pub fn masked_softmax(&self, mask: Option<&AttnMask>, heads: usize) -> Result<Tensor<E>> {
        let shape = self.shape().to_vec();
        if shape.len() != 3 || shape[1] != shape[2] {
            return Err(Error::ShapeMismatch {
                op: "masked_softmax",
                detail: format!("expected [B,L,L], got {:?}", shape),
            });
        }
        let (b, l) = (shape[0], shape[1]);
        if let Some(m) = mask {
            if m.seq != l || heads == 0 || b % (m.windows * heads) != 0 {
                return Err(Error::ShapeMismatch {
                    op: "masked_softmax",
                    detail: format!(
                        "mask windows={} seq={} incompatible with logits {:?} heads={}",
                        m.windows, m.seq, shape, heads
                    ),
                });
            }
        }

        let x = self.data();
        let mut out = vec![E::ZERO; x.len()];
        for bi in 0..b {
            let keep_window = mask.map(|m| (bi / heads) % m.windows);
            for q in 0..l {
                let row = &x[(bi * l + q) * l..][..l];
                let orow = &mut out[(bi * l + q) * l..][..l];
                let keep_row = mask.map(|m| m.keep_row(keep_window.unwrap(), q));
                let mut max = None::<E>;
                for k in 0..l {
                    if keep_row.is_none_or(|kr| kr[k]) {
                        max = Some(match max {
                            Some(m) => m.maximum(row[k]),
                            None => row[k],
                        });
                    }
                }
                let Some(max) = max else {
                    return Err(Error::FullyMaskedRow { row: bi * l + q });
                };
                let mut sum = E::ZERO;
                for k in 0..l {
                    if keep_row.is_none_or(|kr| kr[k]) {
                        let e = (row[k] - max).exp();
                        orow[k] = e;
                        sum += e;
                    }
                }
                let inv = E::ONE / sum;
                for v in orow.iter_mut() {
                    *v *= inv;
                }
            }
        }

        let node = match common_tape(&[self])? {
            None => None,
            Some((tape, ids)) => {
                let s = Arc::new(out.clone());
                let id = tape.push(
                    vec![ids[0].unwrap()],
                    out.len(),
                    Some(Box::new(move |g| {
                        // d l_k = s_k (g_k - sum_j s_j g_j); zero rows stay zero.
                        let mut dx = vec![E::ZERO; g.len()];
                        for r in 0..g.len() / l {
                            let srow = &s[r * l..(r + 1) * l];
                            let grow = &g[r * l..(r + 1) * l];
                            let mut dot = E::ZERO;
                            for k in 0..l {
                                dot = srow[k].mul_add(grow[k], dot);
                            }
                            let drow = &mut dx[r * l..(r + 1) * l];
                            for k in 0..l {
                                drow[k] = srow[k] * (grow[k] - dot);
                            }
                        }
                        vec![dx]
                    })),
                )?;
                Some(NodeRef { tape, id })
            }
        };
        Ok(Tensor::from_op(shape, out, node))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_logits_give_uniform_weights() {
        let x = Tensor::<f64>::zeros(vec![1, 4, 4]);
        let y = x.masked_softmax(None, 1).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn excluded_key_gets_exact_zero() {
        let x = Tensor::<f64>::zeros(vec![1, 2, 2]);
        let keep = vec![true, false, true, false]; // both rows keep only key 0
        let m = AttnMask::new(keep, 1, 2);
        let y = x.masked_softmax(Some(&m), 1).unwrap();
        assert_eq!(y.at(&[0, 0, 0]), 1.0);
        assert_eq!(y.at(&[0, 0, 1]), 0.0);
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let x = Tensor::<f64>::zeros(vec![1, 2, 2]);
        let m = AttnMask::new(vec![false, false, true, true], 1, 2);
        assert!(matches!(
            x.masked_softmax(Some(&m), 1),
            Err(Error::FullyMaskedRow { .. })
        ));
    }

    #[test]
    fn random_mask_matches_exp_normalize_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let l = 6;
        let x = Tensor::<f64>::from_fn(vec![1, l, l], |_| rng.random::<f64>() * 4.0 - 2.0);
        let mut keep = vec![false; l * l];
        for q in 0..l {
            // Keep a random nonempty subset including the diagonal.
            for k in 0..l {
                keep[q * l + k] = k == q || rng.random::<f64>() < 0.5;
            }
        }
        let m = AttnMask::new(keep.clone(), 1, l);
        let y = x.masked_softmax(Some(&m), 1).unwrap();
        for q in 0..l {
            let mut exps = vec![0.0; l];
            let mut sum = 0.0;
            for k in 0..l {
                if keep[q * l + k] {
                    exps[k] = x.at(&[0, q, k]).exp();
                    sum += exps[k];
                }
            }
            let mut row_sum = 0.0;
            for k in 0..l {
                let got = y.at(&[0, q, k]);
                assert!((got - exps[k] / sum).abs() < 1e-12);
                row_sum += got;
            }
            assert!((row_sum - 1.0).abs() < 1e-6);
        }
    }
}
