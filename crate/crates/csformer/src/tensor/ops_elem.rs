use std::sync::Arc;

use super::tape::common_tape;
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// How operand `b` lines up against `a` in a binary op. Only the forms the
/// architecture needs; everything else is rejected loudly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// `b` is a single element.
    Scalar,
    /// `a` is [N,C,H,W], `b` is [N,C,1,1]: per-channel value per batch item.
    Channel { hw: usize },
    /// `a` is [N,C,H,W], `b` is [1,1,H,W]: one value per spatial position
    /// (validity maps on padded features).
    Spatial { hw: usize },
}

fn bcast_of<E: Element>(op: &'static str, a: &Tensor<E>, b: &Tensor<E>) -> Result<Bcast> {
    if a.shape() == b.shape() {
        return Ok(Bcast::Same);
    }
    if b.numel() == 1 {
        return Ok(Bcast::Scalar);
    }
    if a.rank() == 4 && b.rank() == 4 {
        let (n, c, h, w) = a.dims4()?;
        let (bn, bc, bh, bw) = b.dims4()?;
        if bn == n && bc == c && bh == 1 && bw == 1 {
            return Ok(Bcast::Channel { hw: h * w });
        }
        if bn == 1 && bc == 1 && bh == h && bw == w {
            return Ok(Bcast::Spatial { hw: h * w });
        }
    }
    Err(Error::ShapeMismatch {
        op,
        detail: format!("cannot broadcast {:?} against {:?}", b.shape(), a.shape()),
    })
}

const PAR_ELEMWISE: usize = 1 << 15;

/// Expand-free elementwise combine of `a` with broadcast `b`.
fn zip_bcast<E: Element>(a: &[E], b: &[E], bc: Bcast, f: impl Fn(E, E) -> E + Sync) -> Vec<E> {
    use rayon::prelude::*;
    let n = a.len();
    let mut out = vec![E::ZERO; n];
    let fill = |offset: usize, dst: &mut [E]| match bc {
        Bcast::Same => {
            for (i, o) in dst.iter_mut().enumerate() {
                *o = f(a[offset + i], b[offset + i]);
            }
        }
        Bcast::Scalar => {
            let y = b[0];
            for (i, o) in dst.iter_mut().enumerate() {
                *o = f(a[offset + i], y);
            }
        }
        Bcast::Channel { hw } => {
            for (i, o) in dst.iter_mut().enumerate() {
                *o = f(a[offset + i], b[(offset + i) / hw]);
            }
        }
        Bcast::Spatial { hw } => {
            for (i, o) in dst.iter_mut().enumerate() {
                *o = f(a[offset + i], b[(offset + i) % hw]);
            }
        }
    };
    if n >= PAR_ELEMWISE {
        let chunk = n.div_ceil(rayon::current_num_threads().max(1));
        out.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(ci, dst)| fill(ci * chunk, dst));
    } else {
        fill(0, &mut out);
    }
    out
}

fn b_len_of(bc: Bcast, g_len: usize) -> usize {
    match bc {
        Bcast::Same => g_len,
        Bcast::Scalar => 1,
        Bcast::Channel { hw } => g_len / hw,
        Bcast::Spatial { hw } => hw,
    }
}

/// Sum `g ⊙ w` down to `b`'s layout (the adjoint of broadcasting).
fn reduce_to_b<E: Element>(g: &[E], w: Option<&[E]>, bc: Bcast, b_len: usize) -> Vec<E> {
    let term = |i: usize| match w {
        Some(w) => g[i] * w[i],
        None => g[i],
    };
    match bc {
        Bcast::Same => (0..g.len()).map(term).collect(),
        Bcast::Scalar => {
            let mut acc = E::ZERO;
            for i in 0..g.len() {
                acc += term(i);
            }
            vec![acc]
        }
        Bcast::Channel { hw } => {
            let mut out = vec![E::ZERO; b_len];
            for i in 0..g.len() {
                out[i / hw] += term(i);
            }
            out
        }
        Bcast::Spatial { hw } => {
            let mut out = vec![E::ZERO; b_len];
            for i in 0..g.len() {
                out[i % hw] += term(i);
            }
            out
        }
    }
}

impl<E: Element> Tensor<E> {
    fn binary(
        &self,
        other: &Tensor<E>,
        op: &'static str,
        fwd: impl Fn(E, E) -> E,
        back: impl Fn(&[E], &Arc<Vec<E>>, &Arc<Vec<E>>, Bcast, bool, bool) -> Vec<Vec<E>> + 'static,
    ) -> Result<Tensor<E>> {
        let bc = bcast_of(op, self, other)?;
        let data = zip_bcast(self.data(), other.data(), bc, fwd);
        let rec = common_tape(&[self, other])?;
        let node = match rec {
            None => None,
            Some((tape, ids)) => {
                let a_data = self.data_arc();
                let b_data = other.data_arc();
                let (wa, wb) = (ids[0].is_some(), ids[1].is_some());
                let parents: Vec<usize> = ids.into_iter().flatten().collect();
                let id = tape.push(
                    parents,
                    data.len(),
                    Some(Box::new(move |gout| back(gout, &a_data, &b_data, bc, wa, wb))),
                )?;
                Some(super::tape::NodeRef { tape, id })
            }
        };
        Ok(Tensor::from_op(self.shape().to_vec(), data, node))
    }

    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(other, "add", |x, y| x + y, |g, _a, _b, bc, wa, wb| {
            let mut out = Vec::new();
            if wa {
                out.push(g.to_vec());
            }
            if wb {
                out.push(reduce_to_b(g, None, bc, b_len_of(bc, g.len())));
            }
            out
        })
    }

    pub fn sub(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(other, "sub", |x, y| x - y, |g, _a, _b, bc, wa, wb| {
            let mut out = Vec::new();
            if wa {
                out.push(g.to_vec());
            }
            if wb {
                let mut r = reduce_to_b(g, None, bc, b_len_of(bc, g.len()));
                for v in &mut r {
                    *v = -*v;
                }
                out.push(r);
            }
            out
        })
    }

    /// Elementwise product. With a [N,C,1,1] right operand this is the
    /// channel-wise product used by channel attention and the simple gate.
    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(other, "mul", |x, y| x * y, |g, a, b, bc, wa, wb| {
            let mut out = Vec::new();
            if wa {
                out.push(zip_bcast(g, b, bc, |gi, bi| gi * bi));
            }
            if wb {
                out.push(reduce_to_b(g, Some(a), bc, b_len_of(bc, g.len())));
            }
            out
        })
    }

    fn unary(
        &self,
        fwd: impl Fn(E) -> E,
        dfdx: impl Fn(E) -> E + 'static,
    ) -> Result<Tensor<E>> {
        let data: Vec<E> = self.data().iter().map(|&x| fwd(x)).collect();
        let node = match common_tape(&[self])? {
            None => None,
            Some((tape, ids)) => {
                let x = self.data_arc();
                let id = tape.push(
                    vec![ids[0].unwrap()],
                    data.len(),
                    Some(Box::new(move |g| {
                        vec![g.iter().zip(x.iter()).map(|(&gi, &xi)| gi * dfdx(xi)).collect()]
                    })),
                )?;
                Some(super::tape::NodeRef { tape, id })
            }
        };
        Ok(Tensor::from_op(self.shape().to_vec(), data, node))
    }

    pub fn neg(&self) -> Result<Tensor<E>> {
        self.unary(|x| -x, |_| -E::ONE)
    }

    /// Multiply by a compile-side constant.
    pub fn scale(&self, c: E) -> Result<Tensor<E>> {
        self.unary(move |x| x * c, move |_| c)
    }

    pub fn add_scalar(&self, c: E) -> Result<Tensor<E>> {
        self.unary(move |x| x + c, |_| E::ONE)
    }

    /// Exact Gaussian-CDF GELU: x * Phi(x), Phi via erf.
    pub fn gelu(&self) -> Result<Tensor<E>> {
        let half = E::from_f64(0.5);
        let inv_sqrt2 = E::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        let inv_sqrt_2pi = E::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
        self.unary(
            move |x| x * half * (E::ONE + (x * inv_sqrt2).erf()),
            move |x| {
                let phi_cdf = half * (E::ONE + (x * inv_sqrt2).erf());
                let pdf = inv_sqrt_2pi * (-(x * x) * half).exp();
                phi_cdf + x * pdf
            },
        )
    }

    /// Per-element Charbonnier penalty sqrt(x^2 + eps^2), computed as
    /// hypot(x, eps) so the zero-residual value is exactly eps.
    pub fn charbonnier(&self, eps: E) -> Result<Tensor<E>> {
        self.unary(
            move |x| x.hypot(eps),
            move |x| x / x.hypot(eps),
        )
    }
}
