use super::attention::{global_msa, window_msa};
use super::params::{BlockParams, CaParams, GcffnParams};
use super::CaWiring;
use crate::error::{Error, Result};
use crate::tensor::{with_class, AttnMask, Element, MacClass, PoolValidity, Tensor};

pub(crate) const LN_EPS: f64 = 1e-6;

/// Attention flavor of one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnKind {
    Window,
    ShiftedWindow,
    Global,
}

/// Per-level execution context: head count, window geometry, and (when a
/// padding plan is active) the masks that keep padded positions inert. With
/// all options `None` this is plain full-resolution execution.
pub struct LevelCtx<E: Element> {
    pub heads: usize,
    pub window: usize,
    pub shift: usize,
    /// {0,1} map over the padded dims, multiplied in after any op that can
    /// write nonzero values into the pad band (conv bleed, biases, LN beta).
    pub zero_mask: Option<Tensor<E>>,
    pub pool_validity: Option<PoolValidity>,
    pub mask_w: Option<AttnMask>,
    pub mask_sw: Option<AttnMask>,
    pub mask_global: Option<AttnMask>,
}

impl<E: Element> LevelCtx<E> {
    pub fn plain(heads: usize, window: usize) -> Self {
        LevelCtx {
            heads,
            window,
            shift: window / 2,
            zero_mask: None,
            pool_validity: None,
            mask_w: None,
            mask_sw: None,
            mask_global: None,
        }
    }

    /// Re-zero the pad band, keeping the invariant that padded positions are
    /// exactly zero at every op boundary.
    pub fn rezero(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        match &self.zero_mask {
            Some(m) => x.mul(m),
            None => Ok(x.clone()),
        }
    }
}

/// Simple gate followed by simplified channel attention:
/// gate-split conv, elementwise product of the halves, per-channel rescale by
/// the pooled MLP, then a point-wise conv restoring width d.
pub fn channel_attention<E: Element>(
    x: &Tensor<E>,
    p: &CaParams<E>,
    ctx: &LevelCtx<E>,
) -> Result<Tensor<E>> {
    let (_n, d, _h, _w) = x.dims4()?;
    if d % 2 != 0 {
        return Err(Error::ShapeMismatch {
            op: "channel_attention",
            detail: format!("channel count {d} must be even for the simple gate"),
        });
    }
    let gated = ctx.rezero(&x.conv2d(&p.gate.weight, Some(&p.gate.bias), 1, 0, 1)?)?;
    let half = d / 2;
    let u = gated.narrow(1, 0, half)?.mul(&gated.narrow(1, half, half)?)?;
    let pooled = u.avg_pool_valid(ctx.pool_validity.as_ref())?;
    let scale = pooled.conv2d(&p.mlp.weight, Some(&p.mlp.bias), 1, 0, 1)?;
    let rescaled = u.mul(&scale)?;
    ctx.rezero(&rescaled.conv2d(&p.restore.weight, Some(&p.restore.bias), 1, 0, 1)?)
}

/// Gated convolutional feed-forward network: two point-wise -> depth-wise
/// branches, GELU gating, fused by a final point-wise projection.
pub fn gcffn<E: Element>(x: &Tensor<E>, p: &GcffnParams<E>, ctx: &LevelCtx<E>) -> Result<Tensor<E>> {
    with_class(MacClass::Gcffn, || {
        let hidden = p.wd1.weight.shape()[0];
        let branch = |wp: &super::params::Conv2dParams<E>,
                      wd: &super::params::Conv2dParams<E>|
         -> Result<Tensor<E>> {
            let t = ctx.rezero(&x.conv2d(&wp.weight, Some(&wp.bias), 1, 0, 1)?)?;
            ctx.rezero(&t.conv2d(&wd.weight, Some(&wd.bias), 1, 1, hidden)?)
        };
        let x1 = branch(&p.wp1, &p.wd1)?;
        let x2 = branch(&p.wp2, &p.wd2)?;
        let fusedin = x1.gelu()?.mul(&x2)?;
        ctx.rezero(&fusedin.conv2d(&p.wp3.weight, Some(&p.wp3.bias), 1, 0, 1)?)
    })
}

/// One CSformer block: y = x + Attn(LN(x)); out = y + GCFFN(LN(y)), where
/// Attn combines the CA branch with W/SW/G-MSA per the configured wiring.
pub fn csformer_block<E: Element>(
    x: &Tensor<E>,
    p: &BlockParams<E>,
    kind: AttnKind,
    wiring: CaWiring,
    ctx: &LevelCtx<E>,
) -> Result<Tensor<E>> {
    let eps = E::from_f64(LN_EPS);
    let ln1 = ctx.rezero(&x.layer_norm(&p.ln1.gamma, &p.ln1.beta, eps)?)?;
    let msa_out = match kind {
        AttnKind::Window => window_msa(&ln1, &p.msa, ctx.heads, ctx.window, 0, ctx.mask_w.as_ref())?,
        AttnKind::ShiftedWindow => window_msa(
            &ln1,
            &p.msa,
            ctx.heads,
            ctx.window,
            ctx.shift,
            ctx.mask_sw.as_ref(),
        )?,
        AttnKind::Global => global_msa(&ln1, &p.msa, ctx.heads, ctx.mask_global.as_ref())?,
    };
    let msa_out = ctx.rezero(&msa_out)?;
    let component = match wiring {
        CaWiring::Parallel => msa_out.add(&channel_attention(&ln1, &p.ca, ctx)?)?,
        CaWiring::Sequential => channel_attention(&msa_out, &p.ca, ctx)?,
    };
    let y = x.add(&component)?;
    let ln2 = ctx.rezero(&y.layer_norm(&p.ln2.gamma, &p.ln2.beta, eps)?)?;
    y.add(&gcffn(&ln2, &p.gcffn, ctx)?)
}
