use super::params::MsaParams;
use crate::error::{Error, Result};
use crate::tensor::{with_class, AttnMask, Element, MacClass, Tensor};

/// Relative-position index of every (query, key) pair inside a ws x ws
/// window, into a (2ws-1)^2 row table.
pub fn rel_index_map(ws: usize) -> Vec<usize> {
    let l = ws * ws;
    let span = 2 * ws - 1;
    let mut idx = Vec::with_capacity(l * l);
    for q in 0..l {
        let (qy, qx) = (q / ws, q % ws);
        for k in 0..l {
            let (ky, kx) = (k / ws, k % ws);
            let dy = qy + ws - 1 - ky;
            let dx = qx + ws - 1 - kx;
            idx.push(dy * span + dx);
        }
    }
    idx
}

/// Multi-head softmax attention over token batches [B, L, d]; the core of
/// W-MSA, SW-MSA and G-MSA. Scale is 1/sqrt(d/heads).
fn attn_tokens<E: Element>(
    tokens: &Tensor<E>,
    p: &MsaParams<E>,
    heads: usize,
    mask: Option<&AttnMask>,
    rel_idx: Option<&[usize]>,
) -> Result<Tensor<E>> {
    let shape = tokens.shape().to_vec();
    let (b, l, d) = (shape[0], shape[1], shape[2]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::ShapeMismatch {
            op: "attn_tokens",
            detail: format!("heads {heads} must divide width {d}"),
        });
    }
    let dh = d / heads;

    let qkv = with_class(MacClass::AttnQkv, || {
        tokens.linear(&p.qkv.weight, Some(&p.qkv.bias))
    })?;
    let qkv = qkv.reshape(vec![b, l, 3, heads, dh])?;
    let split = |i: usize| -> Result<Tensor<E>> {
        qkv.narrow(2, i, 1)?
            .reshape(vec![b, l, heads, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(vec![b * heads, l, dh])
    };
    let q = split(0)?.scale(E::from_f64(1.0 / (dh as f64).sqrt()))?;
    let k = split(1)?;
    let v = split(2)?;

    let mut logits = with_class(MacClass::AttnLogits, || q.bmm(&k, true))?;
    if let (Some(table), Some(idx)) = (p.rel_bias.as_ref(), rel_idx) {
        let bias = table
            .index_select_rows(idx)? // [L*L, heads]
            .permute(&[1, 0])? // [heads, L*L]
            .reshape(vec![heads, l, l])?
            .tile_axis0(b)?;
        logits = logits.add(&bias)?;
    }
    let attn = logits.masked_softmax(mask, heads)?;
    let ctx = with_class(MacClass::AttnValues, || attn.bmm(&v, false))?;
    let merged = ctx
        .reshape(vec![b, heads, l, dh])?
        .permute(&[0, 2, 1, 3])?
        .reshape(vec![b, l, d])?;
    with_class(MacClass::AttnQkv, || {
        merged.linear(&p.proj.weight, Some(&p.proj.bias))
    })
}

/// Window-based multi-head self-attention with optional cyclic shift.
/// `mask` must combine the shift mask with any padding mask for this level
/// (see the inference planner); `None` means full windows, no shift
/// restrictions.
pub fn window_msa<E: Element>(
    x: &Tensor<E>,
    p: &MsaParams<E>,
    heads: usize,
    window: usize,
    shift: usize,
    mask: Option<&AttnMask>,
) -> Result<Tensor<E>> {
    let (n, _d, h, w) = x.dims4()?;
    if h % window != 0 || w % window != 0 {
        return Err(Error::ShapeMismatch {
            op: "window_msa",
            detail: format!("{h}x{w} not divisible by window {window}; plan padding first"),
        });
    }
    let rolled = if shift > 0 {
        x.roll2d(-(shift as isize), -(shift as isize))?
    } else {
        x.clone()
    };
    let tokens = rolled.window_partition(window)?;
    let rel_idx = p.rel_bias.as_ref().map(|_| rel_index_map(window));
    let out = attn_tokens(&tokens, p, heads, mask, rel_idx.as_deref())?;
    let map = out.window_reverse(window, n, h, w)?;
    if shift > 0 {
        map.roll2d(shift as isize, shift as isize)
    } else {
        Ok(map)
    }
}

/// Full-image multi-head self-attention (bottleneck stage): one window
/// covering all h*w tokens.
pub fn global_msa<E: Element>(
    x: &Tensor<E>,
    p: &MsaParams<E>,
    heads: usize,
    mask: Option<&AttnMask>,
) -> Result<Tensor<E>> {
    let (n, d, h, w) = x.dims4()?;
    let tokens = x.reshape(vec![n, d, h * w])?.permute(&[0, 2, 1])?;
    let out = attn_tokens(&tokens, p, heads, mask, None)?;
    out.permute(&[0, 2, 1])?.reshape(vec![n, d, h, w])
}
