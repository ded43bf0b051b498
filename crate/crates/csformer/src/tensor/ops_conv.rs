use rayon::prelude::*;

use super::ops_linalg::{mm_acc, mm_at_acc, mm_bt_acc};
use super::tape::{common_tape, NodeRef};
use super::{tally, Element, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
struct ConvDims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    groups: usize,
    hout: usize,
    wout: usize,
}

impl ConvDims {
    fn cg(&self) -> usize {
        self.cin / self.groups
    }
    fn coutg(&self) -> usize {
        self.cout / self.groups
    }
    fn kwidth(&self) -> usize {
        self.cg() * self.kh * self.kw
    }
    fn ohw(&self) -> usize {
        self.hout * self.wout
    }
}

/// Unfold one (sample, group) into a [cg*kh*kw, Hout*Wout] patch matrix.
fn im2col<E: Element>(x: &[E], d: &ConvDims, n: usize, g: usize, cols: &mut [E]) {
    let (cg, kh, kw) = (d.cg(), d.kh, d.kw);
    let ohw = d.ohw();
    cols.fill(E::ZERO);
    for cl in 0..cg {
        let plane = &x[((n * d.cin + g * cg + cl) * d.h) * d.w..][..d.h * d.w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((cl * kh + ky) * kw + kx) * ohw;
                for oy in 0..d.hout {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..d.wout {
                        let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                        if ix < 0 || ix >= d.w as isize {
                            continue;
                        }
                        cols[row + oy * d.wout + ox] = plane[iy * d.w + ix as usize];
                    }
                }
            }
        }
    }
}

/// Scatter-add the adjoint of im2col back into the input gradient.
fn col2im_acc<E: Element>(dcols: &[E], d: &ConvDims, n: usize, g: usize, dx: &mut [E]) {
    let (cg, kh, kw) = (d.cg(), d.kh, d.kw);
    let ohw = d.ohw();
    for cl in 0..cg {
        let base = ((n * d.cin + g * cg + cl) * d.h) * d.w;
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((cl * kh + ky) * kw + kx) * ohw;
                for oy in 0..d.hout {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..d.wout {
                        let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                        if ix < 0 || ix >= d.w as isize {
                            continue;
                        }
                        dx[base + iy * d.w + ix as usize] += dcols[row + oy * d.wout + ox];
                    }
                }
            }
        }
    }
}

/// 3x3 / stride 1 / pad 1 depth-wise plane: borders handled separately so the
/// interior runs branch-free and vectorizes.
fn dw3x3_plane<E: Element>(xp: &[E], wp: &[E], op: &mut [E], h: usize, w: usize) {
    for oy in 0..h {
        let orow = &mut op[oy * w..(oy + 1) * w];
        for ky in 0..3usize {
            let iy = oy as isize + ky as isize - 1;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            let xrow = &xp[iy as usize * w..][..w];
            let (w0, w1, w2) = (wp[ky * 3], wp[ky * 3 + 1], wp[ky * 3 + 2]);
            if w == 1 {
                orow[0] = w1.mul_add(xrow[0], orow[0]);
                continue;
            }
            orow[0] = w2.mul_add(xrow[1], w1.mul_add(xrow[0], orow[0]));
            orow[w - 1] = w1.mul_add(xrow[w - 1], w0.mul_add(xrow[w - 2], orow[w - 1]));
            let dst = &mut orow[1..w - 1];
            let (xl, xm, xr) = (&xrow[..w - 2], &xrow[1..w - 1], &xrow[2..]);
            for i in 0..dst.len() {
                dst[i] = w2.mul_add(xr[i], w1.mul_add(xm[i], w0.mul_add(xl[i], dst[i])));
            }
        }
    }
}

fn conv_forward<E: Element>(x: &[E], w: &[E], bias: Option<&[E]>, d: &ConvDims) -> Vec<E> {
    let ohw = d.ohw();
    let mut out = vec![E::ZERO; d.n * d.cout * ohw];
    if let Some(b) = bias {
        for ni in 0..d.n {
            for oc in 0..d.cout {
                out[(ni * d.cout + oc) * ohw..(ni * d.cout + oc + 1) * ohw].fill(b[oc]);
            }
        }
    }
    let depthwise = d.groups == d.cin && d.cout == d.cin && d.groups > 1;
    if depthwise {
        let fast = d.kh == 3 && d.kw == 3 && d.stride == 1 && d.pad == 1;
        out.par_chunks_mut(ohw).enumerate().for_each(|(plane_idx, op)| {
            let (ni, c) = (plane_idx / d.cout, plane_idx % d.cout);
            let xp = &x[(ni * d.cin + c) * d.h * d.w..][..d.h * d.w];
            let wp = &w[c * d.kh * d.kw..][..d.kh * d.kw];
            if fast {
                dw3x3_plane(xp, wp, op, d.h, d.w);
                return;
            }
            for oy in 0..d.hout {
                for ox in 0..d.wout {
                    let mut acc = op[oy * d.wout + ox];
                    for ky in 0..d.kh {
                        let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        for kx in 0..d.kw {
                            let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                            if ix < 0 || ix >= d.w as isize {
                                continue;
                            }
                            acc = wp[ky * d.kw + kx]
                                .mul_add(xp[iy as usize * d.w + ix as usize], acc);
                        }
                    }
                    op[oy * d.wout + ox] = acc;
                }
            }
        });
        return out;
    }

    let pointwise = d.kh == 1 && d.kw == 1 && d.stride == 1 && d.pad == 0;
    let kwidth = d.kwidth();
    let coutg = d.coutg();
    let mut cols = vec![E::ZERO; kwidth * ohw];
    for ni in 0..d.n {
        for g in 0..d.groups {
            let wg = &w[g * coutg * kwidth..(g + 1) * coutg * kwidth];
            let og = &mut out[(ni * d.cout + g * coutg) * ohw..(ni * d.cout + (g + 1) * coutg) * ohw];
            if pointwise {
                let xg = &x[(ni * d.cin + g * d.cg()) * ohw..(ni * d.cin + (g + 1) * d.cg()) * ohw];
                mm_acc(og, wg, xg, coutg, kwidth, ohw);
            } else {
                im2col(x, d, ni, g, &mut cols);
                mm_acc(og, wg, &cols, coutg, kwidth, ohw);
            }
        }
    }
    out
}

impl<E: Element> Tensor<E> {
    /// 2-d convolution over [N,Cin,H,W] with weight [Cout,Cin/groups,kh,kw].
    /// Depth-wise (groups = Cin) and 1x1 point-wise cases take fast paths.
    pub fn conv2d(
        &self,
        weight: &Tensor<E>,
        bias: Option<&Tensor<E>>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Tensor<E>> {
        let (n, cin, h, w) = self.dims4()?;
        let (cout, cg, kh, kw) = weight.dims4()?;
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cg != cin / groups {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!(
                    "x {:?}, weight {:?}, groups {}",
                    self.shape(),
                    weight.shape(),
                    groups
                ),
            });
        }
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("kernel {}x{} stride {} pad {} on {}x{}", kh, kw, stride, pad, h, w),
            });
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    detail: format!("bias {:?}, expected [{}]", b.shape(), cout),
                });
            }
        }
        let d = ConvDims {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            groups,
            hout: (h + 2 * pad - kh) / stride + 1,
            wout: (w + 2 * pad - kw) / stride + 1,
        };
        tally::record((d.n * d.cout * d.cg() * d.kh * d.kw * d.ohw()) as u64);
        let data = conv_forward(self.data(), weight.data(), bias.map(|b| b.data()), &d);

        let operands: Vec<&Tensor<E>> = match bias {
            Some(b) => vec![self, weight, b],
            None => vec![self, weight],
        };
        let node = match common_tape(&operands)? {
            None => None,
            Some((tape, ids)) => {
                let x = self.data_arc();
                let wdat = weight.data_arc();
                let wants: Vec<bool> = ids.iter().map(|i| i.is_some()).collect();
                let parents: Vec<usize> = ids.into_iter().flatten().collect();
                let id = tape.push(
                    parents,
                    data.len(),
                    Some(Box::new(move |g| conv_backward(g, &x, &wdat, &d, &wants))),
                )?;
                Some(NodeRef { tape, id })
            }
        };
        Ok(Tensor::from_op(vec![n, cout, d.hout, d.wout], data, node))
    }
}

fn conv_backward<E: Element>(
    g: &[E],
    x: &[E],
    w: &[E],
    d: &ConvDims,
    wants: &[bool],
) -> Vec<Vec<E>> {
    let ohw = d.ohw();
    let kwidth = d.kwidth();
    let coutg = d.coutg();
    let want_x = wants[0];
    let want_w = wants[1];
    let want_b = wants.len() > 2 && wants[2];

    let mut dx = if want_x { vec![E::ZERO; x.len()] } else { Vec::new() };
    let mut dw = if want_w { vec![E::ZERO; w.len()] } else { Vec::new() };
    let mut db = if want_b { vec![E::ZERO; d.cout] } else { Vec::new() };

    if want_b {
        for ni in 0..d.n {
            for oc in 0..d.cout {
                let gp = &g[(ni * d.cout + oc) * ohw..][..ohw];
                let mut acc = E::ZERO;
                for &v in gp {
                    acc += v;
                }
                db[oc] += acc;
            }
        }
    }

    let depthwise = d.groups == d.cin && d.cout == d.cin && d.groups > 1;
    if depthwise {
        let fast = d.kh == 3 && d.kw == 3 && d.stride == 1 && d.pad == 1;
        if fast {
            if want_x {
                // dx is the correlation of g with the flipped kernel, which
                // is the same 3x3/pad-1 stencil run with reversed taps.
                dx.par_chunks_mut(d.h * d.w).enumerate().for_each(|(plane_idx, dxp)| {
                    let (ni, c) = (plane_idx / d.cin, plane_idx % d.cin);
                    let gp = &g[(ni * d.cout + c) * ohw..][..ohw];
                    let wp = &w[c * 9..][..9];
                    let flipped: [E; 9] = std::array::from_fn(|i| wp[8 - i]);
                    dw3x3_plane(gp, &flipped, dxp, d.h, d.w);
                });
            }
            if want_w {
                dw.par_chunks_mut(9).enumerate().for_each(|(c, dwc)| {
                    for ni in 0..d.n {
                        let gp = &g[(ni * d.cout + c) * ohw..][..ohw];
                        let xp = &x[(ni * d.cin + c) * d.h * d.w..][..d.h * d.w];
                        for ky in 0..3usize {
                            for kx in 0..3usize {
                                // Overlap of g[oy][ox] with x[oy+ky-1][ox+kx-1].
                                let oy0 = 1usize.saturating_sub(ky);
                                let oy1 = (d.h + 1 - ky).min(d.h);
                                let ox0 = 1usize.saturating_sub(kx);
                                let ox1 = (d.w + 1 - kx).min(d.w);
                                if ox0 >= ox1 {
                                    continue;
                                }
                                let mut acc = E::ZERO;
                                for oy in oy0..oy1 {
                                    let iy = oy + ky - 1;
                                    let grow = &gp[oy * d.w + ox0..oy * d.w + ox1];
                                    let xrow = &xp[iy * d.w + ox0 + kx - 1..][..ox1 - ox0];
                                    for (&gv, &xv) in grow.iter().zip(xrow) {
                                        acc = gv.mul_add(xv, acc);
                                    }
                                }
                                dwc[ky * 3 + kx] += acc;
                            }
                        }
                    }
                });
            }
        } else {
            for ni in 0..d.n {
                for c in 0..d.cin {
                    let gp = &g[(ni * d.cout + c) * ohw..][..ohw];
                    let xp = &x[(ni * d.cin + c) * d.h * d.w..][..d.h * d.w];
                    let wp = &w[c * d.kh * d.kw..][..d.kh * d.kw];
                    for oy in 0..d.hout {
                        for ox in 0..d.wout {
                            let gv = gp[oy * d.wout + ox];
                            for ky in 0..d.kh {
                                let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                                if iy < 0 || iy >= d.h as isize {
                                    continue;
                                }
                                for kx in 0..d.kw {
                                    let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                                    if ix < 0 || ix >= d.w as isize {
                                        continue;
                                    }
                                    let xi = iy as usize * d.w + ix as usize;
                                    if want_w {
                                        dw[c * d.kh * d.kw + ky * d.kw + kx] = gv
                                            .mul_add(xp[xi], dw[c * d.kh * d.kw + ky * d.kw + kx]);
                                    }
                                    if want_x {
                                        let base = (ni * d.cin + c) * d.h * d.w;
                                        dx[base + xi] =
                                            gv.mul_add(wp[ky * d.kw + kx], dx[base + xi]);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    } else {
        let pointwise = d.kh == 1 && d.kw == 1 && d.stride == 1 && d.pad == 0;
        let mut cols = vec![E::ZERO; kwidth * ohw];
        let mut dcols = vec![E::ZERO; kwidth * ohw];
        for ni in 0..d.n {
            for gi in 0..d.groups {
                let gg = &g[(ni * d.cout + gi * coutg) * ohw..(ni * d.cout + (gi + 1) * coutg) * ohw];
                let wg = &w[gi * coutg * kwidth..(gi + 1) * coutg * kwidth];
                if pointwise {
                    let xg = &x[(ni * d.cin + gi * d.cg()) * ohw..(ni * d.cin + (gi + 1) * d.cg()) * ohw];
                    if want_w {
                        let dwg = &mut dw[gi * coutg * kwidth..(gi + 1) * coutg * kwidth];
                        mm_bt_acc(dwg, gg, xg, coutg, ohw, kwidth);
                    }
                    if want_x {
                        let dxg = &mut dx
                            [(ni * d.cin + gi * d.cg()) * ohw..(ni * d.cin + (gi + 1) * d.cg()) * ohw];
                        mm_at_acc(dxg, wg, gg, coutg, kwidth, ohw);
                    }
                } else {
                    if want_w {
                        im2col(x, d, ni, gi, &mut cols);
                        let dwg = &mut dw[gi * coutg * kwidth..(gi + 1) * coutg * kwidth];
                        mm_bt_acc(dwg, gg, &cols, coutg, ohw, kwidth);
                    }
                    if want_x {
                        dcols.fill(E::ZERO);
                        mm_at_acc(&mut dcols, wg, gg, coutg, kwidth, ohw);
                        col2im_acc(&dcols, d, ni, gi, &mut dx);
                    }
                }
            }
        }
    }

    let mut out = Vec::new();
    if want_x {
        out.push(dx);
    }
    if want_w {
        out.push(dw);
    }
    if want_b {
        out.push(db);
    }
    out
}
