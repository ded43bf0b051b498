use std::sync::Arc;

use super::tape::{common_tape, NodeRef};
use super::{Element, Tensor};
use crate::error::{Error, Result};

impl<E: Element> Tensor<E> {
    /// LayerNorm over the channel axis of [N,C,H,W]: every spatial token is
    /// normalized to zero mean / unit variance across its C values, then
    /// scaled and shifted by gamma/beta (shape [C]). Loops run plane by
    /// plane so the channel-strided token access never leaves cache.
    pub fn layer_norm(&self, gamma: &Tensor<E>, beta: &Tensor<E>, eps: E) -> Result<Tensor<E>> {
        let (n, c, h, w) = self.dims4()?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                detail: format!(
                    "gamma {:?} / beta {:?} for C = {}",
                    gamma.shape(),
                    beta.shape(),
                    c
                ),
            });
        }
        let hw = h * w;
        let x = self.data();
        let gm = gamma.data();
        let bt = beta.data();
        let inv_c = E::from_f64(1.0 / c as f64);

        let mut out = vec![E::ZERO; x.len()];
        let mut xhat = vec![E::ZERO; x.len()];
        let mut rstd = vec![E::ZERO; n * hw];
        let mut mean = vec![E::ZERO; hw];
        let mut var = vec![E::ZERO; hw];
        for ni in 0..n {
            let xb = &x[ni * c * hw..(ni + 1) * c * hw];
            mean.fill(E::ZERO);
            for ch in 0..c {
                let plane = &xb[ch * hw..(ch + 1) * hw];
                for (m, &v) in mean.iter_mut().zip(plane) {
                    *m += v;
                }
            }
            for m in mean.iter_mut() {
                *m *= inv_c;
            }
            var.fill(E::ZERO);
            for ch in 0..c {
                let plane = &xb[ch * hw..(ch + 1) * hw];
                for ((vv, &v), &m) in var.iter_mut().zip(plane).zip(&mean) {
                    let d = v - m;
                    *vv = d.mul_add(d, *vv);
                }
            }
            let rs = &mut rstd[ni * hw..(ni + 1) * hw];
            for (r, &vv) in rs.iter_mut().zip(&var) {
                *r = E::ONE / (vv * inv_c + eps).sqrt();
            }
            for ch in 0..c {
                let base = ni * c * hw + ch * hw;
                let (g, b) = (gm[ch], bt[ch]);
                for t in 0..hw {
                    let xh = (x[base + t] - mean[t]) * rs[t];
                    xhat[base + t] = xh;
                    out[base + t] = g.mul_add(xh, b);
                }
            }
        }

        let node = match common_tape(&[self, gamma, beta])? {
            None => None,
            Some((tape, ids)) => {
                let xhat = Arc::new(xhat);
                let rstd = Arc::new(rstd);
                let gm = gamma.data_arc();
                let wants: Vec<bool> = ids.iter().map(|i| i.is_some()).collect();
                let parents: Vec<usize> = ids.into_iter().flatten().collect();
                let id = tape.push(
                    parents,
                    out.len(),
                    Some(Box::new(move |g| {
                        let mut res = Vec::new();
                        if wants[0] {
                            let mut dx = vec![E::ZERO; g.len()];
                            let mut mean_dxh = vec![E::ZERO; hw];
                            let mut mean_dxh_xh = vec![E::ZERO; hw];
                            for ni in 0..n {
                                mean_dxh.fill(E::ZERO);
                                mean_dxh_xh.fill(E::ZERO);
                                for ch in 0..c {
                                    let base = ni * c * hw + ch * hw;
                                    let gmv = gm[ch];
                                    for t in 0..hw {
                                        let dxh = g[base + t] * gmv;
                                        mean_dxh[t] += dxh;
                                        mean_dxh_xh[t] = dxh.mul_add(xhat[base + t], mean_dxh_xh[t]);
                                    }
                                }
                                for t in 0..hw {
                                    mean_dxh[t] *= inv_c;
                                    mean_dxh_xh[t] *= inv_c;
                                }
                                let rs = &rstd[ni * hw..(ni + 1) * hw];
                                for ch in 0..c {
                                    let base = ni * c * hw + ch * hw;
                                    let gmv = gm[ch];
                                    for t in 0..hw {
                                        let dxh = g[base + t] * gmv;
                                        dx[base + t] = rs[t]
                                            * (dxh - mean_dxh[t] - xhat[base + t] * mean_dxh_xh[t]);
                                    }
                                }
                            }
                            res.push(dx);
                        }
                        if wants[1] {
                            let mut dg = vec![E::ZERO; c];
                            for ni in 0..n {
                                for (ch, dgv) in dg.iter_mut().enumerate() {
                                    let base = (ni * c + ch) * hw;
                                    let mut acc = E::ZERO;
                                    for t in 0..hw {
                                        acc = g[base + t].mul_add(xhat[base + t], acc);
                                    }
                                    *dgv += acc;
                                }
                            }
                            res.push(dg);
                        }
                        if wants[2] {
                            let mut db = vec![E::ZERO; c];
                            for ni in 0..n {
                                for (ch, dbv) in db.iter_mut().enumerate() {
                                    let base = (ni * c + ch) * hw;
                                    let mut acc = E::ZERO;
                                    for t in 0..hw {
                                        acc += g[base + t];
                                    }
                                    *dbv += acc;
                                }
                            }
                            res.push(db);
                        }
                        res
                    })),
                )?;
                Some(NodeRef { tape, id })
            }
        };
        Ok(Tensor::from_op(self.shape().to_vec(), out, node))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_input_gives_beta() {
        let x = Tensor::<f64>::full(vec![1, 3, 2, 2], 5.0);
        let gamma = Tensor::<f64>::full(vec![3], 2.0);
        let beta = Tensor::<f64>::from_vec(vec![3], vec![0.1, 0.2, 0.3]).unwrap();
        let y = x.layer_norm(&gamma, &beta, 1e-6).unwrap();
        for t in 0..4 {
            for c in 0..3 {
                assert!((y.at(&[0, c, t / 2, t % 2]) - beta.data()[c]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn unit_affine_normalizes_each_token() {
        let x = Tensor::<f64>::from_vec(vec![1, 3, 1, 1], vec![1.0, 2.0, 6.0]).unwrap();
        let gamma = Tensor::<f64>::full(vec![3], 1.0);
        let beta = Tensor::<f64>::zeros(vec![3]);
        let y = x.layer_norm(&gamma, &beta, 1e-6).unwrap();
        let vals: Vec<f64> = y.data().to_vec();
        let mean: f64 = vals.iter().sum::<f64>() / 3.0;
        let var: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn tokens_normalize_independently() {
        // Two tokens with different scales both end up standardized.
        let x = Tensor::<f64>::from_vec(
            vec![1, 4, 1, 2],
            vec![10.0, -1.0, 20.0, -2.0, 30.0, -3.0, 40.0, -4.0],
        )
        .unwrap();
        let gamma = Tensor::<f64>::full(vec![4], 1.0);
        let beta = Tensor::<f64>::zeros(vec![4]);
        let y = x.layer_norm(&gamma, &beta, 1e-9).unwrap();
        for t in 0..2 {
            let vals: Vec<f64> = (0..4).map(|c| y.at(&[0, c, 0, t])).collect();
            let mean: f64 = vals.iter().sum::<f64>() / 4.0;
            let var: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9, "token {t}");
            assert!((var - 1.0).abs() < 1e-6, "token {t}");
        }
    }
}
