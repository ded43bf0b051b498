//! Index-rearrangement ops: every forward is a gather, every backward the
//! matching scatter, so gradients are exact by construction.

use super::tape::{common_tape, NodeRef};
use super::{numel_of, Element, Tensor};
use crate::error::{Error, Result};

impl<E: Element> Tensor<E> {
    fn record_unary(
        &self,
        out_shape: Vec<usize>,
        data: Vec<E>,
        back: impl Fn(&[E]) -> Vec<E> + 'static,
    ) -> Result<Tensor<E>> {
        let node = match common_tape(&[self])? {
            None => None,
            Some((tape, ids)) => {
                let id = tape.push(
                    vec![ids[0].unwrap()],
                    data.len(),
                    Some(Box::new(move |g| vec![back(g)])),
                )?;
                Some(NodeRef { tape, id })
            }
        };
        Ok(Tensor::from_op(out_shape, data, node))
    }

    /// Reinterpret the buffer under a new shape with equal element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor<E>> {
        if numel_of(&shape) != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.shape(), shape),
            });
        }
        self.record_unary(shape, self.data().to_vec(), |g| g.to_vec())
    }

    /// Reorder axes; materializes the permuted layout.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<E>> {
        let rank = self.rank();
        if axes.len() != rank || {
            let mut seen = vec![false; rank];
            axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true))
        } {
            return Err(Error::ShapeMismatch {
                op: "permute",
                detail: format!("axes {:?} invalid for rank {}", axes, rank),
            });
        }
        let (data, out_shape) = permute_kernel(self.data(), self.shape(), axes);
        let mut inv = vec![0usize; rank];
        for (i, &a) in axes.iter().enumerate() {
            inv[a] = i;
        }
        let saved_out = out_shape.clone();
        self.record_unary(out_shape, data, move |g| {
            permute_kernel(g, &saved_out, &inv).0
        })
    }

    /// Slice `len` extents starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<E>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::ShapeMismatch {
                op: "narrow",
                detail: format!("axis {} range {}..{} of {:?}", axis, start, start + len, shape),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let ext = shape[axis];
        let mut out_shape = shape.clone();
        out_shape[axis] = len;

        let src = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let in_len = self.numel();
        self.record_unary(out_shape, data, move |g| {
            let mut gi = vec![E::ZERO; in_len];
            for o in 0..outer {
                let dst = (o * ext + start) * inner;
                let srcb = o * len * inner;
                gi[dst..dst + len * inner].copy_from_slice(&g[srcb..srcb + len * inner]);
            }
            gi
        })
    }

    /// Concatenate along the channel axis of [N,C,H,W] tensors.
    pub fn concat_channels(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        let (n, ca, h, w) = self.dims4()?;
        let (n2, cb, h2, w2) = other.dims4()?;
        if n != n2 || h != h2 || w != w2 {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                detail: format!("{:?} vs {:?}", self.shape(), other.shape()),
            });
        }
        let hw = h * w;
        let mut data = Vec::with_capacity((ca + cb) * n * hw);
        for i in 0..n {
            data.extend_from_slice(&self.data()[i * ca * hw..(i + 1) * ca * hw]);
            data.extend_from_slice(&other.data()[i * cb * hw..(i + 1) * cb * hw]);
        }
        let node = match common_tape(&[self, other])? {
            None => None,
            Some((tape, ids)) => {
                let (wa, wb) = (ids[0].is_some(), ids[1].is_some());
                let parents: Vec<usize> = ids.into_iter().flatten().collect();
                let id = tape.push(
                    parents,
                    data.len(),
                    Some(Box::new(move |g| {
                        let mut out = Vec::new();
                        if wa {
                            let mut ga = Vec::with_capacity(n * ca * hw);
                            for i in 0..n {
                                let base = i * (ca + cb) * hw;
                                ga.extend_from_slice(&g[base..base + ca * hw]);
                            }
                            out.push(ga);
                        }
                        if wb {
                            let mut gb = Vec::with_capacity(n * cb * hw);
                            for i in 0..n {
                                let base = i * (ca + cb) * hw + ca * hw;
                                gb.extend_from_slice(&g[base..base + cb * hw]);
                            }
                            out.push(gb);
                        }
                        out
                    })),
                )?;
                Some(NodeRef { tape, id })
            }
        };
        Ok(Tensor::from_op(vec![n, ca + cb, h, w], data, node))
    }

    /// Zero-pad the bottom/right spatial edges of a [N,C,H,W] tensor.
    pub fn pad2d(&self, bottom: usize, right: usize) -> Result<Tensor<E>> {
        let (n, c, h, w) = self.dims4()?;
        let (hp, wp) = (h + bottom, w + right);
        let src = self.data();
        let mut data = vec![E::ZERO; n * c * hp * wp];
        for nc in 0..n * c {
            for y in 0..h {
                let s = (nc * h + y) * w;
                let d = (nc * hp + y) * wp;
                data[d..d + w].copy_from_slice(&src[s..s + w]);
            }
        }
        self.record_unary(vec![n, c, hp, wp], data, move |g| {
            let mut gi = vec![E::ZERO; n * c * h * w];
            for nc in 0..n * c {
                for y in 0..h {
                    let d = (nc * h + y) * w;
                    let s = (nc * hp + y) * wp;
                    gi[d..d + w].copy_from_slice(&g[s..s + w]);
                }
            }
            gi
        })
    }

    /// Keep the top-left `h x w` spatial region of a [N,C,H,W] tensor.
    pub fn crop2d(&self, h: usize, w: usize) -> Result<Tensor<E>> {
        let (n, c, hp, wp) = self.dims4()?;
        if h > hp || w > wp {
            return Err(Error::ShapeMismatch {
                op: "crop2d",
                detail: format!("crop {}x{} of {}x{}", h, w, hp, wp),
            });
        }
        let src = self.data();
        let mut data = Vec::with_capacity(n * c * h * w);
        for nc in 0..n * c {
            for y in 0..h {
                let s = (nc * hp + y) * wp;
                data.extend_from_slice(&src[s..s + w]);
            }
        }
        self.record_unary(vec![n, c, h, w], data, move |g| {
            let mut gi = vec![E::ZERO; n * c * hp * wp];
            for nc in 0..n * c {
                for y in 0..h {
                    let d = (nc * hp + y) * wp;
                    let s = (nc * h + y) * w;
                    gi[d..d + w].copy_from_slice(&g[s..s + w]);
                }
            }
            gi
        })
    }

    /// Cyclic spatial shift: content moves down by `dy` and right by `dx`
    /// (negative shifts move up/left), wrapping around.
    pub fn roll2d(&self, dy: isize, dx: isize) -> Result<Tensor<E>> {
        let (n, c, h, w) = self.dims4()?;
        let data = roll_kernel(self.data(), n * c, h, w, dy, dx);
        self.record_unary(self.shape().to_vec(), data, move |g| {
            roll_kernel(g, n * c, h, w, -dy, -dx)
        })
    }

    /// Partition a [N,C,H,W] map (H, W multiples of `ws`) into per-window
    /// token matrices [N*nW, ws*ws, C]; windows and in-window tokens are
    /// row-major.
    pub fn window_partition(&self, ws: usize) -> Result<Tensor<E>> {
        let (n, c, h, w) = self.dims4()?;
        if h % ws != 0 || w % ws != 0 {
            return Err(Error::ShapeMismatch {
                op: "window_partition",
                detail: format!("{}x{} not divisible by window {}", h, w, ws),
            });
        }
        let data = window_gather(self.data(), n, c, h, w, ws, false);
        let nw = (h / ws) * (w / ws);
        self.record_unary(vec![n * nw, ws * ws, c], data, move |g| {
            window_gather(g, n, c, h, w, ws, true)
        })
    }

    /// Inverse of [`Tensor::window_partition`]: tokens [N*nW, ws*ws, C] back
    /// to a [N,C,H,W] map.
    pub fn window_reverse(&self, ws: usize, n: usize, h: usize, w: usize) -> Result<Tensor<E>> {
        let shape = self.shape().to_vec();
        let nw = (h / ws) * (w / ws);
        if shape.len() != 3 || shape[0] != n * nw || shape[1] != ws * ws {
            return Err(Error::ShapeMismatch {
                op: "window_reverse",
                detail: format!("tokens {:?} vs {} windows of {}x{}", shape, nw, ws, ws),
            });
        }
        let c = shape[2];
        let data = window_gather(self.data(), n, c, h, w, ws, true);
        self.record_unary(vec![n, c, h, w], data, move |g| {
            window_gather(g, n, c, h, w, ws, false)
        })
    }

    /// Row gather from a [R, D] table: out[i] = table[indices[i]]. Used for
    /// relative-position bias lookups; gradients scatter-add back into rows.
    pub fn index_select_rows(&self, indices: &[usize]) -> Result<Tensor<E>> {
        let shape = self.shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "index_select_rows",
                detail: format!("expected [R,D] table, got {:?}", shape),
            });
        }
        let (r, d) = (shape[0], shape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::ShapeMismatch {
                op: "index_select_rows",
                detail: format!("index {} out of {} rows", bad, r),
            });
        }
        let src = self.data();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let idx: Vec<usize> = indices.to_vec();
        self.record_unary(vec![indices.len(), d], data, move |g| {
            let mut gt = vec![E::ZERO; r * d];
            for (row, &i) in idx.iter().enumerate() {
                for j in 0..d {
                    gt[i * d + j] += g[row * d + j];
                }
            }
            gt
        })
    }

    /// Repeat the whole tensor `times` along a new leading grouping of axis 0
    /// ([D0, ...] -> [times*D0, ...]). The gradient sums the repeats.
    pub fn tile_axis0(&self, times: usize) -> Result<Tensor<E>> {
        let mut shape = self.shape().to_vec();
        if shape.is_empty() || times == 0 {
            return Err(Error::ShapeMismatch {
                op: "tile_axis0",
                detail: format!("shape {:?}, times {}", shape, times),
            });
        }
        let n = self.numel();
        let mut data = Vec::with_capacity(n * times);
        for _ in 0..times {
            data.extend_from_slice(self.data());
        }
        shape[0] *= times;
        self.record_unary(shape, data, move |g| {
            let mut gi = vec![E::ZERO; n];
            for rep in g.chunks(n) {
                for (a, &b) in gi.iter_mut().zip(rep) {
                    *a += b;
                }
            }
            gi
        })
    }

    /// Space-to-depth by factor `r`: [N,C,H,W] -> [N,C*r^2,H/r,W/r] with the
    /// sub-pixel offset packed as c' = c*r^2 + dy*r + dx.
    pub fn pixel_unshuffle(&self, r: usize) -> Result<Tensor<E>> {
        let (n, c, h, w) = self.dims4()?;
        if h % r != 0 || w % r != 0 {
            return Err(Error::ShapeMismatch {
                op: "pixel_unshuffle",
                detail: format!("{}x{} not divisible by {}", h, w, r),
            });
        }
        let data = unshuffle_kernel(self.data(), n, c, h, w, r, false);
        self.record_unary(vec![n, c * r * r, h / r, w / r], data, move |g| {
            unshuffle_kernel(g, n, c, h, w, r, true)
        })
    }

    /// Depth-to-space by factor `r`: exact inverse of pixel_unshuffle.
    pub fn pixel_shuffle(&self, r: usize) -> Result<Tensor<E>> {
        let (n, cr2, hs, ws) = self.dims4()?;
        if cr2 % (r * r) != 0 {
            return Err(Error::ShapeMismatch {
                op: "pixel_shuffle",
                detail: format!("channels {} not divisible by {}^2", cr2, r),
            });
        }
        let c = cr2 / (r * r);
        let (h, w) = (hs * r, ws * r);
        let data = unshuffle_kernel(self.data(), n, c, h, w, r, true);
        self.record_unary(vec![n, c, h, w], data, move |g| {
            unshuffle_kernel(g, n, c, h, w, r, false)
        })
    }
}

fn permute_kernel<E: Element>(data: &[E], shape: &[usize], axes: &[usize]) -> (Vec<E>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides_for_out: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(data[src]);
        // Odometer increment over the output index space.
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += strides_for_out[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= strides_for_out[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

fn roll_kernel<E: Element>(data: &[E], planes: usize, h: usize, w: usize, dy: isize, dx: isize) -> Vec<E> {
    let sy = dy.rem_euclid(h as isize) as usize;
    let sx = dx.rem_euclid(w as isize) as usize;
    let mut out = vec![E::ZERO; data.len()];
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..h {
            let ys = (y + h - sy) % h;
            for x in 0..w {
                let xs = (x + w - sx) % w;
                out[base + y * w + x] = data[base + ys * w + xs];
            }
        }
    }
    out
}

/// Gather between map layout [N,C,H,W] and window-token layout
/// [N*nW, ws*ws, C]. `reverse = false` produces tokens from the map;
/// `reverse = true` produces the map from tokens.
fn window_gather<E: Element>(
    data: &[E],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    ws: usize,
    reverse: bool,
) -> Vec<E> {
    let wpr = w / ws;
    let nw = (h / ws) * wpr;
    let l = ws * ws;
    let mut out = vec![E::ZERO; n * c * h * w];
    for ni in 0..n {
        for wy in 0..h / ws {
            for wx in 0..wpr {
                let wi = ni * nw + wy * wpr + wx;
                for iy in 0..ws {
                    for ix in 0..ws {
                        let tok = iy * ws + ix;
                        let (y, x) = (wy * ws + iy, wx * ws + ix);
                        for ch in 0..c {
                            let map = ((ni * c + ch) * h + y) * w + x;
                            let win = (wi * l + tok) * c + ch;
                            if reverse {
                                out[map] = data[win];
                            } else {
                                out[win] = data[map];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gather between [N,C,H,W] and [N,C*r^2,H/r,W/r]. `reverse = false` is
/// unshuffle (space to depth); `reverse = true` is shuffle.
fn unshuffle_kernel<E: Element>(
    data: &[E],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    r: usize,
    reverse: bool,
) -> Vec<E> {
    let (hs, wsz) = (h / r, w / r);
    let mut out = vec![E::ZERO; data.len()];
    for ni in 0..n {
        for ch in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    let cp = ch * r * r + dy * r + dx;
                    for ys in 0..hs {
                        for xs in 0..wsz {
                            let fine = ((ni * c + ch) * h + ys * r + dy) * w + xs * r + dx;
                            let coarse = ((ni * c * r * r + cp) * hs + ys) * wsz + xs;
                            if reverse {
                                out[fine] = data[coarse];
                            } else {
                                out[coarse] = data[fine];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq4(n: usize, c: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn(vec![n, c, h, w], |i| i as f64)
    }

    #[test]
    fn unshuffle_2x2_enumeration() {
        // [[1,2],[3,4]] single channel, r=2 -> 4 channels of 1x1 {1,2,3,4}.
        let x = Tensor::<f64>::from_vec(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = x.pixel_unshuffle(2).unwrap();
        assert_eq!(y.shape(), &[1, 4, 1, 1]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
        let back = y.pixel_shuffle(2).unwrap();
        assert!(back.bit_eq(&x));
    }

    #[test]
    fn unshuffle_channel_order_matches_index_formula() {
        let (n, c, h, w, r) = (1usize, 3usize, 4usize, 4usize, 2usize);
        let x = seq4(n, c, h, w);
        let y = x.pixel_unshuffle(r).unwrap();
        for ch in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    let cp = ch * r * r + dy * r + dx;
                    for ys in 0..h / r {
                        for xs in 0..w / r {
                            assert_eq!(
                                y.at(&[0, cp, ys, xs]),
                                x.at(&[0, ch, ys * r + dy, xs * r + dx])
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn roll_and_unroll() {
        let x = seq4(1, 2, 4, 5);
        let y = x.roll2d(-1, 2).unwrap().roll2d(1, -2).unwrap();
        assert!(y.bit_eq(&x));
        let z = x.roll2d(1, 0).unwrap();
        assert_eq!(z.at(&[0, 0, 1, 0]), x.at(&[0, 0, 0, 0]));
        assert_eq!(z.at(&[0, 0, 0, 0]), x.at(&[0, 0, 3, 0]));
    }

    #[test]
    fn window_partition_round_trip_and_count() {
        let x = seq4(2, 3, 16, 16);
        let tok = x.window_partition(8).unwrap();
        assert_eq!(tok.shape(), &[2 * 4, 64, 3]);
        let back = tok.window_reverse(8, 2, 16, 16).unwrap();
        assert!(back.bit_eq(&x));
    }

    #[test]
    fn window_contents_match_index_formula() {
        let x = seq4(1, 2, 8, 8);
        let ws = 4;
        let tok = x.window_partition(ws).unwrap();
        let wpr = 8 / ws;
        for wy in 0..2 {
            for wx in 0..2 {
                for iy in 0..ws {
                    for ix in 0..ws {
                        for c in 0..2 {
                            assert_eq!(
                                tok.at(&[wy * wpr + wx, iy * ws + ix, c]),
                                x.at(&[0, c, wy * ws + iy, wx * ws + ix])
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn pad_then_crop_is_identity() {
        let x = seq4(1, 2, 3, 5);
        let y = x.pad2d(2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 2, 5, 6]);
        assert_eq!(y.at(&[0, 0, 4, 0]), 0.0);
        assert!(y.crop2d(3, 5).unwrap().bit_eq(&x));
    }

    #[test]
    fn permute_transposes() {
        let x = Tensor::<f64>::from_vec(vec![2, 3], (0..6).map(|v| v as f64).collect()).unwrap();
        let y = x.permute(&[1, 0]).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(y.at(&[j, i]), x.at(&[i, j]));
            }
        }
    }

    #[test]
    fn narrow_selects_channels() {
        let x = seq4(1, 4, 2, 2);
        let y = x.narrow(1, 1, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 2]);
        assert_eq!(y.at(&[0, 0, 0, 0]), x.at(&[0, 1, 0, 0]));
    }

    #[test]
    fn concat_channels_projections() {
        let a = seq4(2, 2, 2, 2);
        let b = Tensor::<f64>::full(vec![2, 3, 2, 2], -1.0);
        let y = a.concat_channels(&b).unwrap();
        assert_eq!(y.shape(), &[2, 5, 2, 2]);
        assert_eq!(y.at(&[1, 0, 0, 0]), a.at(&[1, 0, 0, 0]));
        assert_eq!(y.at(&[1, 4, 1, 1]), -1.0);
    }
}
