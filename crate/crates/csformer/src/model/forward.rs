use std::sync::Arc;

use super::block::{csformer_block, AttnKind, LevelCtx};
use super::params::{Conv2dParams, ModelParams};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::inference::{build_global_mask, build_window_mask, PadPlan, StagePlan};
use crate::tensor::{with_class, Element, MacClass, PoolValidity, Tensor};

/// Everything a forward pass returns: the restored image (input + residual
/// in finetune mode, plain reconstruction in pretrain mode), the residual
/// map itself, and the bottleneck latent at (H/16, W/16, 16C).
pub struct ForwardOutputs<E: Element> {
    pub restored: Tensor<E>,
    pub residual: Tensor<E>,
    pub latent: Tensor<E>,
}

/// 3x3 same-padding shallow embedding conv.
pub fn shallow_embed<E: Element>(
    image: &Tensor<E>,
    embed: &Conv2dParams<E>,
) -> Result<Tensor<E>> {
    image.conv2d(&embed.weight, Some(&embed.bias), 1, 1, 1)
}

/// pixel-unshuffle(2) then 1x1 conv 4c -> 2c.
pub fn downsample<E: Element>(x: &Tensor<E>, conv: &Conv2dParams<E>) -> Result<Tensor<E>> {
    let t = x.pixel_unshuffle(2)?;
    with_class(MacClass::Resample, || {
        t.conv2d(&conv.weight, Some(&conv.bias), 1, 0, 1)
    })
}

/// 1x1 conv c -> 2c then pixel-shuffle(2), halving channels overall.
pub fn upsample<E: Element>(x: &Tensor<E>, conv: &Conv2dParams<E>) -> Result<Tensor<E>> {
    let t = with_class(MacClass::Resample, || {
        x.conv2d(&conv.weight, Some(&conv.bias), 1, 0, 1)
    })?;
    t.pixel_shuffle(2)
}

/// Concatenate decoder features with the encoder skip (decoder first) and
/// reduce 2c -> c with a 1x1 conv.
pub fn skip_fuse<E: Element>(
    dec: &Tensor<E>,
    enc: &Tensor<E>,
    conv: &Conv2dParams<E>,
) -> Result<Tensor<E>> {
    let cat = dec.concat_channels(enc)?;
    cat.conv2d(&conv.weight, Some(&conv.bias), 1, 0, 1)
}

fn level_ctx<E: Element>(cfg: &ModelConfig, level: usize, stage: &StagePlan) -> LevelCtx<E> {
    let (hp, wp) = stage.padded;
    let ws = cfg.window_size;
    let validity = stage.has_padding().then(|| stage.validity_map());
    let zero_mask = validity.as_ref().map(|v| {
        Tensor::from_fn(vec![1, 1, hp, wp], |i| if v[i] { E::ONE } else { E::ZERO })
    });
    let pool_validity = validity.as_ref().map(|v| PoolValidity {
        map: Arc::new(v.clone()),
        count: stage.valid_count(),
    });
    let (mask_w, mask_sw, mask_global) = if level == 5 {
        (None, None, build_global_mask(hp, wp, validity.as_deref()))
    } else {
        (
            build_window_mask(hp, wp, ws, 0, validity.as_deref()),
            build_window_mask(hp, wp, ws, ws / 2, validity.as_deref()),
            None,
        )
    };
    LevelCtx {
        heads: cfg.heads(level),
        window: ws,
        shift: ws / 2,
        zero_mask,
        pool_validity,
        mask_w,
        mask_sw,
        mask_global,
    }
}

fn pad_to<E: Element>(x: &Tensor<E>, dims: (usize, usize)) -> Result<Tensor<E>> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == dims {
        Ok(x.clone())
    } else {
        x.pad2d(dims.0 - h, dims.1 - w)
    }
}

fn attn_kind(level: usize, block_idx: usize) -> AttnKind {
    if level == 5 {
        AttnKind::Global
    } else if block_idx % 2 == 0 {
        AttnKind::Window
    } else {
        AttnKind::ShiftedWindow
    }
}

fn resolve_plan(
    image_dims: (usize, usize),
    cfg: &ModelConfig,
    plan: Option<&PadPlan>,
) -> Result<PadPlan> {
    match plan {
        Some(p) => {
            if p.input != image_dims || p.window != cfg.window_size {
                return Err(Error::ShapeMismatch {
                    op: "model_forward",
                    detail: format!(
                        "plan for input {:?} window {}, image is {:?} window {}",
                        p.input, p.window, image_dims, cfg.window_size
                    ),
                });
            }
            Ok(p.clone())
        }
        None => {
            let p = crate::inference::plan_padding(image_dims.0, image_dims.1, cfg);
            if !p.is_trivial() {
                return Err(Error::ShapeMismatch {
                    op: "model_forward",
                    detail: format!(
                        "input {:?} is not divisible through all levels; pass a PadPlan",
                        image_dims
                    ),
                });
            }
            Ok(p)
        }
    }
}

struct Encoded<E: Element> {
    latent: Tensor<E>,
    skips: Vec<Tensor<E>>,
    ctxs: Vec<LevelCtx<E>>,
    plan: PadPlan,
}

fn encode<E: Element>(
    image: &Tensor<E>,
    params: &ModelParams<E>,
    cfg: &ModelConfig,
    plan: Option<&PadPlan>,
) -> Result<Encoded<E>> {
    let (_n, cin, h, w) = image.dims4()?;
    if cin != cfg.in_channels {
        return Err(Error::ShapeMismatch {
            op: "model_forward",
            detail: format!("image has {cin} channels, config expects {}", cfg.in_channels),
        });
    }
    let plan = resolve_plan((h, w), cfg, plan)?;
    let ctxs: Vec<LevelCtx<E>> = (1..=5).map(|l| level_ctx(cfg, l, plan.stage(l))).collect();

    let mut x = pad_to(image, plan.stage(1).padded)?;
    x = shallow_embed(&x, &params.embed)?;
    x = ctxs[0].rezero(&x)?;

    let mut skips = Vec::with_capacity(4);
    for level in 1..=4usize {
        let ctx = &ctxs[level - 1];
        for (i, bp) in params.encoder[level - 1].iter().enumerate() {
            x = csformer_block(&x, bp, attn_kind(level, i), cfg.ca_wiring, ctx)?;
        }
        let stage = plan.stage(level);
        let cropped = x.crop2d(stage.valid.0, stage.valid.1)?;
        skips.push(cropped.clone());
        let evened = pad_to(&cropped, stage.pre_down_even)?;
        x = downsample(&evened, &params.down[level - 1])?;
        x = pad_to(&x, plan.stage(level + 1).padded)?;
    }

    let ctx5 = &ctxs[4];
    for bp in &params.bottleneck {
        x = csformer_block(&x, bp, AttnKind::Global, cfg.ca_wiring, ctx5)?;
    }
    let s5 = plan.stage(5);
    let latent = x.crop2d(s5.valid.0, s5.valid.1)?;
    Ok(Encoded {
        latent,
        skips,
        ctxs,
        plan,
    })
}

/// Run the encoder half only (masked-autoencoder stage-1 pre-training):
/// embedding, encoder stages, bottleneck. Returns the latent.
pub fn forward_encoder<E: Element>(
    image: &Tensor<E>,
    params: &ModelParams<E>,
    cfg: &ModelConfig,
    plan: Option<&PadPlan>,
) -> Result<Tensor<E>> {
    Ok(encode(image, params, cfg, plan)?.latent)
}

/// Full forward pass. In finetune mode the restored image is I + R̂; in
/// pretrain mode the I -> output skip is removed and the network output is
/// the reconstruction itself.
pub fn model_forward<E: Element>(
    image: &Tensor<E>,
    params: &ModelParams<E>,
    cfg: &ModelConfig,
    plan: Option<&PadPlan>,
) -> Result<ForwardOutputs<E>> {
    let enc = encode(image, params, cfg, plan)?;
    let mut x = enc.latent.clone();
    for (j, level) in (1..=4usize).rev().enumerate() {
        let stage = enc.plan.stage(level);
        let up = upsample(&x, &params.up[j])?;
        let up = up.crop2d(stage.valid.0, stage.valid.1)?;
        let fused = skip_fuse(&up, &enc.skips[level - 1], &params.fuse[j])?;
        x = pad_to(&fused, stage.padded)?;
        let ctx = &enc.ctxs[level - 1];
        // Fused content needs one re-zero: the fuse conv bias dirties the
        // band only when the band already exists pre-pad (it does not), but
        // the pad itself is fresh zeros, so nothing to do here.
        for (i, bp) in params.decoder[j].iter().enumerate() {
            x = csformer_block(&x, bp, attn_kind(level, i), cfg.ca_wiring, ctx)?;
        }
        x = x.crop2d(stage.valid.0, stage.valid.1)?;
    }
    let residual = x.conv2d(&params.output.weight, Some(&params.output.bias), 1, 1, 1)?;
    let restored = if cfg.pretrain_mode {
        residual.clone()
    } else {
        image.add(&residual)?
    };
    Ok(ForwardOutputs {
        restored,
        residual,
        latent: enc.latent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::plan_padding;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_image(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(vec![n, c, h, w], |_| rng.random::<f32>())
    }

    #[test]
    fn fresh_model_is_identity_restoration() {
        // Zero-initialized output conv: restored == input bit-exactly.
        let cfg = ModelConfig::nano();
        let params = ModelParams::<f32>::init(&cfg, 0).unwrap();
        let img = rand_image(1, 3, 64, 64, 1);
        let out = model_forward(&img, &params, &cfg, None).unwrap();
        assert!(out.restored.bit_eq(&img));
        assert!(out.residual.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn latent_shape_for_64x64_c8() {
        let cfg = ModelConfig::nano();
        let params = ModelParams::<f32>::init(&cfg, 0).unwrap();
        let img = rand_image(2, 3, 64, 64, 2);
        let out = model_forward(&img, &params, &cfg, None).unwrap();
        assert_eq!(out.latent.shape(), &[2, 128, 4, 4]);
        assert_eq!(out.restored.shape(), &[2, 3, 64, 64]);
    }

    #[test]
    fn downsample_shape_trace_matches_channel_schedule() {
        // 64x64, C=8: (8,64,64)->(16,32,32)->(32,16,16)->(64,8,8)->(128,4,4).
        let cfg = ModelConfig::nano();
        let params = ModelParams::<f32>::init(&cfg, 3).unwrap();
        let mut x = rand_image(1, 8, 64, 64, 4);
        let mut dims = vec![(8usize, 64usize)];
        for level in 1..=4 {
            x = downsample(&x, &params.down[level - 1]).unwrap();
            dims.push((x.shape()[1], x.shape()[2]));
        }
        assert_eq!(dims, vec![(8, 64), (16, 32), (32, 16), (64, 8), (128, 4)]);
    }

    #[test]
    fn upsample_then_downsample_round_trips_shape() {
        let cfg = ModelConfig::nano();
        let params = ModelParams::<f32>::init(&cfg, 5).unwrap();
        let x = rand_image(1, 16, 8, 8, 6); // level 2 width
        let down = downsample(&x, &params.down[1]).unwrap();
        assert_eq!(down.shape(), &[1, 32, 4, 4]);
        let up = upsample(&down, &params.up[2]).unwrap(); // up into level 2
        assert_eq!(up.shape(), x.shape());
    }

    #[test]
    fn downsample_with_identity_permutation_is_lossless() {
        // 1x1 conv taking the first 2c of the 4c unshuffled channels keeps
        // half the information; a full-rank 4c->4c identity keeps all of it.
        // Check invertibility through the actual unshuffle/shuffle pair.
        let x = rand_image(1, 4, 6, 6, 7);
        let un = x.pixel_unshuffle(2).unwrap();
        let re = un.pixel_shuffle(2).unwrap();
        assert!(re.bit_eq(&x));
    }

    #[test]
    fn skip_fuse_projections_select_either_input() {
        let c = 4;
        let dec = rand_image(1, c, 5, 5, 8);
        let enc = rand_image(1, c, 5, 5, 9);
        // [I | 0] selects the decoder features.
        let sel_dec = Conv2dParams {
            weight: Tensor::<f32>::from_fn(vec![c, 2 * c, 1, 1], |i| {
                let (o, ic) = (i / (2 * c), i % (2 * c));
                if o == ic {
                    1.0
                } else {
                    0.0
                }
            }),
            bias: Tensor::zeros(vec![c]),
        };
        assert!(skip_fuse(&dec, &enc, &sel_dec).unwrap().bit_eq(&dec));
        // [0 | I] selects the encoder skip.
        let sel_enc = Conv2dParams {
            weight: Tensor::<f32>::from_fn(vec![c, 2 * c, 1, 1], |i| {
                let (o, ic) = (i / (2 * c), i % (2 * c));
                if ic == o + c {
                    1.0
                } else {
                    0.0
                }
            }),
            bias: Tensor::zeros(vec![c]),
        };
        assert!(skip_fuse(&dec, &enc, &sel_enc).unwrap().bit_eq(&enc));
    }

    #[test]
    fn skip_fuse_matches_concat_matmul_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let c = 3;
        let dec = Tensor::<f64>::from_fn(vec![1, c, 2, 2], |_| rng.random::<f64>() - 0.5);
        let enc = Tensor::<f64>::from_fn(vec![1, c, 2, 2], |_| rng.random::<f64>() - 0.5);
        let conv = Conv2dParams {
            weight: Tensor::<f64>::from_fn(vec![c, 2 * c, 1, 1], |_| rng.random::<f64>() - 0.5),
            bias: Tensor::<f64>::from_fn(vec![c], |_| rng.random::<f64>() - 0.5),
        };
        let got = skip_fuse(&dec, &enc, &conv).unwrap();
        for o in 0..c {
            for t in 0..4 {
                let mut want = conv.bias.data()[o];
                for i in 0..c {
                    want += conv.weight.at(&[o, i, 0, 0]) * dec.at(&[0, i, t / 2, t % 2]);
                    want += conv.weight.at(&[o, i + c, 0, 0]) * enc.at(&[0, i, t / 2, t % 2]);
                }
                assert!((got.at(&[0, o, t / 2, t % 2]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn embed_identity_tap_copies_channel() {
        let cfg = ModelConfig::nano();
        // Kernel with center tap 1 on (out 0, in 0): channel 0 copies input 0.
        let mut w = vec![0.0f32; 8 * 3 * 9];
        w[4] = 1.0;
        let embed = Conv2dParams {
            weight: Tensor::from_vec(vec![8, 3, 3, 3], w).unwrap(),
            bias: Tensor::zeros(vec![8]),
        };
        let img = rand_image(1, 3, 16, 16, 11);
        let f = shallow_embed(&img, &embed).unwrap();
        assert_eq!(f.shape(), &[1, cfg.base_channels, 16, 16]);
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(f.at(&[0, 0, y, x]), img.at(&[0, 0, y, x]));
            }
        }
        // Zero weights map to a zero feature map.
        let zero_embed = Conv2dParams {
            weight: Tensor::zeros(vec![8, 3, 3, 3]),
            bias: Tensor::zeros(vec![8]),
        };
        let z = shallow_embed(&img, &zero_embed).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_divisible_input_without_plan_errors() {
        let cfg = ModelConfig::nano();
        let params = ModelParams::<f32>::init(&cfg, 0).unwrap();
        let img = rand_image(1, 3, 48, 48, 12);
        assert!(model_forward(&img, &params, &cfg, None).is_err());
        let plan = plan_padding(48, 48, &cfg);
        let out = model_forward(&img, &params, &cfg, Some(&plan)).unwrap();
        assert_eq!(out.restored.shape(), &[1, 3, 48, 48]);
    }

    #[test]
    fn pretrain_mode_removes_input_skip() {
        let mut cfg = ModelConfig::nano();
        cfg.pretrain_mode = true;
        let params = ModelParams::<f32>::init(&cfg, 0).unwrap();
        let img = rand_image(1, 3, 64, 64, 13);
        let out = model_forward(&img, &params, &cfg, None).unwrap();
        // Zeroed output conv in pretrain mode: output is zero, not the input.
        assert!(out.restored.data().iter().all(|&v| v == 0.0));
    }
}
