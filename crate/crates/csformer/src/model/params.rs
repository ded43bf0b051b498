use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor};

#[derive(Clone, Copy)]
pub enum InitKind {
    /// Truncated normal, std 0.02, resampled beyond 2 sigma.
    TruncNormal,
    /// Uniform +-1/sqrt(fan_in).
    FanInUniform { fan_in: usize },
    Zeros,
    Ones,
}

/// Supplier of parameter tensors during a structural walk. One walk serves
/// initialization, checkpoint loading, casting and parameter counting, so the
/// name set cannot drift between them.
pub(crate) trait ParamSource<E: Element> {
    fn tensor(&mut self, name: &str, shape: Vec<usize>, init: InitKind) -> Result<Tensor<E>>;
}

struct InitSource {
    rng: ChaCha8Rng,
}

impl InitSource {
    fn trunc_normal<E: Element>(&mut self, std: f64) -> E {
        loop {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            if z.abs() <= 2.0 {
                return E::from_f64(z * std);
            }
        }
    }
}

impl<E: Element> ParamSource<E> for InitSource {
    fn tensor(&mut self, _name: &str, shape: Vec<usize>, init: InitKind) -> Result<Tensor<E>> {
        let n: usize = shape.iter().product();
        let data: Vec<E> = match init {
            InitKind::TruncNormal => (0..n).map(|_| self.trunc_normal(0.02)).collect(),
            InitKind::FanInUniform { fan_in } => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..n)
                    .map(|_| E::from_f64((self.rng.random::<f64>() * 2.0 - 1.0) * bound))
                    .collect()
            }
            InitKind::Zeros => vec![E::ZERO; n],
            InitKind::Ones => vec![E::ONE; n],
        };
        Tensor::from_vec(shape, data)
    }
}

struct CountSource {
    total: usize,
}

impl<E: Element> ParamSource<E> for CountSource {
    fn tensor(&mut self, _name: &str, shape: Vec<usize>, _init: InitKind) -> Result<Tensor<E>> {
        self.total += shape.iter().product::<usize>();
        Ok(Tensor::zeros(shape))
    }
}

/// Builds parameters by name lookup; records names that were absent from the
/// map (left at their fresh init) and consumes matches so leftovers can be
/// reported.
struct NamedSource<E: Element> {
    map: HashMap<String, Tensor<E>>,
    fresh: InitSource,
    pub missing: Vec<String>,
    strict: bool,
}

impl<E: Element> ParamSource<E> for NamedSource<E> {
    fn tensor(&mut self, name: &str, shape: Vec<usize>, init: InitKind) -> Result<Tensor<E>> {
        match self.map.remove(name) {
            Some(t) => {
                if t.shape() != shape.as_slice() {
                    return Err(Error::Checkpoint(format!(
                        "tensor `{name}` has shape {:?}, expected {:?}",
                        t.shape(),
                        shape
                    )));
                }
                Ok(t)
            }
            None if self.strict => Err(Error::Checkpoint(format!("missing tensor `{name}`"))),
            None => {
                self.missing.push(name.to_string());
                self.fresh.tensor(name, shape, init)
            }
        }
    }
}

#[derive(Clone)]
pub struct Conv2dParams<E: Element> {
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
}

#[derive(Clone)]
pub struct LinearParams<E: Element> {
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
}

#[derive(Clone)]
pub struct LayerNormParams<E: Element> {
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
}

/// Channel attention: a point-wise conv whose output is gate-split, the
/// pooling MLP, and the width-restoring projection.
#[derive(Clone)]
pub struct CaParams<E: Element> {
    pub gate: Conv2dParams<E>,
    pub mlp: Conv2dParams<E>,
    pub restore: Conv2dParams<E>,
}

#[derive(Clone)]
pub struct MsaParams<E: Element> {
    pub qkv: LinearParams<E>,
    pub proj: LinearParams<E>,
    pub rel_bias: Option<Tensor<E>>,
}

#[derive(Clone)]
pub struct GcffnParams<E: Element> {
    pub wp1: Conv2dParams<E>,
    pub wd1: Conv2dParams<E>,
    pub wp2: Conv2dParams<E>,
    pub wd2: Conv2dParams<E>,
    pub wp3: Conv2dParams<E>,
}

#[derive(Clone)]
pub struct BlockParams<E: Element> {
    pub ln1: LayerNormParams<E>,
    pub ca: CaParams<E>,
    pub msa: MsaParams<E>,
    pub ln2: LayerNormParams<E>,
    pub gcffn: GcffnParams<E>,
}

/// Full named parameter set of a CSformer instance.
#[derive(Clone)]
pub struct ModelParams<E: Element> {
    pub embed: Conv2dParams<E>,
    /// Encoder blocks by level 1..=4 (index 0 = level 1).
    pub encoder: Vec<Vec<BlockParams<E>>>,
    /// Downsampling convs after encoder level 1..=4.
    pub down: Vec<Conv2dParams<E>>,
    pub bottleneck: Vec<BlockParams<E>>,
    /// Upsampling convs into decoder level 4..=1 (index 0 = into level 4).
    pub up: Vec<Conv2dParams<E>>,
    /// Skip-fusion convs at decoder level 4..=1.
    pub fuse: Vec<Conv2dParams<E>>,
    /// Decoder blocks by level 4..=1 (index 0 = level 4).
    pub decoder: Vec<Vec<BlockParams<E>>>,
    pub output: Conv2dParams<E>,
}

fn conv<E: Element, S: ParamSource<E>>(
    src: &mut S,
    name: &str,
    cout: usize,
    cin_per_group: usize,
    k: usize,
    weight_init: Option<InitKind>,
) -> Result<Conv2dParams<E>> {
    let init = weight_init.unwrap_or(InitKind::FanInUniform {
        fan_in: cin_per_group * k * k,
    });
    Ok(Conv2dParams {
        weight: src.tensor(&format!("{name}.weight"), vec![cout, cin_per_group, k, k], init)?,
        bias: src.tensor(&format!("{name}.bias"), vec![cout], InitKind::Zeros)?,
    })
}

fn linear<E: Element, S: ParamSource<E>>(
    src: &mut S,
    name: &str,
    din: usize,
    dout: usize,
) -> Result<LinearParams<E>> {
    Ok(LinearParams {
        weight: src.tensor(&format!("{name}.weight"), vec![din, dout], InitKind::TruncNormal)?,
        bias: src.tensor(&format!("{name}.bias"), vec![dout], InitKind::Zeros)?,
    })
}

fn layer_norm<E: Element, S: ParamSource<E>>(
    src: &mut S,
    name: &str,
    d: usize,
) -> Result<LayerNormParams<E>> {
    Ok(LayerNormParams {
        gamma: src.tensor(&format!("{name}.gamma"), vec![d], InitKind::Ones)?,
        beta: src.tensor(&format!("{name}.beta"), vec![d], InitKind::Zeros)?,
    })
}

fn block<E: Element, S: ParamSource<E>>(
    src: &mut S,
    name: &str,
    cfg: &ModelConfig,
    level: usize,
) -> Result<BlockParams<E>> {
    let d = cfg.width(level);
    let half = d / 2;
    let hidden = cfg.gcffn_hidden(d);
    let ws = cfg.window_size;
    Ok(BlockParams {
        ln1: layer_norm(src, &format!("{name}.ln1"), d)?,
        ca: CaParams {
            gate: conv(src, &format!("{name}.ca.gate"), d, d, 1, None)?,
            mlp: conv(src, &format!("{name}.ca.mlp"), half, half, 1, Some(InitKind::TruncNormal))?,
            restore: conv(src, &format!("{name}.ca.restore"), d, half, 1, None)?,
        },
        msa: MsaParams {
            qkv: linear(src, &format!("{name}.msa.qkv"), d, 3 * d)?,
            proj: linear(src, &format!("{name}.msa.proj"), d, d)?,
            rel_bias: if cfg.rel_pos_bias && level < 5 {
                Some(src.tensor(
                    &format!("{name}.msa.rel_bias"),
                    vec![(2 * ws - 1) * (2 * ws - 1), cfg.heads(level)],
                    InitKind::TruncNormal,
                )?)
            } else {
                None
            },
        },
        ln2: layer_norm(src, &format!("{name}.ln2"), d)?,
        gcffn: GcffnParams {
            wp1: conv(src, &format!("{name}.gcffn.wp1"), hidden, d, 1, None)?,
            wd1: conv(src, &format!("{name}.gcffn.wd1"), hidden, 1, 3, None)?,
            wp2: conv(src, &format!("{name}.gcffn.wp2"), hidden, d, 1, None)?,
            wd2: conv(src, &format!("{name}.gcffn.wd2"), hidden, 1, 3, None)?,
            wp3: conv(src, &format!("{name}.gcffn.wp3"), d, hidden, 1, None)?,
        },
    })
}

fn build_model<E: Element, S: ParamSource<E>>(
    cfg: &ModelConfig,
    src: &mut S,
) -> Result<ModelParams<E>> {
    cfg.validate()?;
    let c = cfg.base_channels;
    let embed = conv(src, "embed", c, cfg.in_channels, 3, None)?;

    let mut encoder = Vec::with_capacity(4);
    let mut down = Vec::with_capacity(4);
    for level in 1..=4 {
        let blocks = (0..cfg.encoder_blocks(level))
            .map(|i| block(src, &format!("enc{level}.block{i}"), cfg, level))
            .collect::<Result<Vec<_>>>()?;
        encoder.push(blocks);
        let cw = cfg.width(level);
        down.push(conv(src, &format!("down{level}"), 2 * cw, 4 * cw, 1, None)?);
    }

    let bottleneck = (0..cfg.bottleneck_blocks())
        .map(|i| block(src, &format!("bottleneck.block{i}"), cfg, 5))
        .collect::<Result<Vec<_>>>()?;

    let mut up = Vec::with_capacity(4);
    let mut fuse = Vec::with_capacity(4);
    let mut decoder = Vec::with_capacity(4);
    for level in (1..=4).rev() {
        let cw = cfg.width(level);
        up.push(conv(src, &format!("up{level}"), 4 * cw, 2 * cw, 1, None)?);
        fuse.push(conv(src, &format!("fuse{level}"), cw, 2 * cw, 1, None)?);
        let blocks = (0..cfg.decoder_blocks(level))
            .map(|i| block(src, &format!("dec{level}.block{i}"), cfg, level))
            .collect::<Result<Vec<_>>>()?;
        decoder.push(blocks);
    }

    let output = conv(src, "output", cfg.out_channels(), c, 3, Some(InitKind::Zeros))?;

    Ok(ModelParams {
        embed,
        encoder,
        down,
        bottleneck,
        up,
        fuse,
        decoder,
        output,
    })
}

impl<E: Element> ModelParams<E> {
    /// Deterministic initialization: same seed, bit-identical parameters.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        build_model(cfg, &mut InitSource {
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Total scalar parameter count as a pure function of the config.
    pub fn count(cfg: &ModelConfig) -> Result<usize> {
        let mut src = CountSource { total: 0 };
        build_model::<E, _>(cfg, &mut src)?;
        Ok(src.total)
    }

    /// Rebuild from a name -> tensor map. In strict mode every parameter must
    /// be present; otherwise absent names fall back to a seeded fresh init
    /// and are reported. Unconsumed map entries are returned as the second
    /// list (loaded-name audit).
    pub fn from_named(
        cfg: &ModelConfig,
        tensors: HashMap<String, Tensor<E>>,
        strict: bool,
        fresh_seed: u64,
    ) -> Result<(Self, Vec<String>, Vec<String>)> {
        let mut src = NamedSource {
            map: tensors,
            fresh: InitSource {
                rng: ChaCha8Rng::seed_from_u64(fresh_seed),
            },
            missing: Vec::new(),
            strict,
        };
        let params = build_model(cfg, &mut src)?;
        let mut leftover: Vec<String> = src.map.into_keys().collect();
        leftover.sort();
        Ok((params, src.missing, leftover))
    }

    /// Walk every named leaf tensor in builder order.
    pub fn visit(&self, f: &mut impl FnMut(&str, &Tensor<E>)) {
        self.map_leaves(&mut |name, t| {
            f(name, t);
            Ok(t.clone())
        })
        .expect("infallible visit");
    }

    pub fn leaves(&self) -> Vec<(String, Tensor<E>)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }

    /// Rebuild with every leaf replaced by `f`'s output.
    pub fn map_leaves(
        &self,
        f: &mut impl FnMut(&str, &Tensor<E>) -> Result<Tensor<E>>,
    ) -> Result<Self> {
        let conv = |f: &mut dyn FnMut(&str, &Tensor<E>) -> Result<Tensor<E>>,
                    name: &str,
                    c: &Conv2dParams<E>|
         -> Result<Conv2dParams<E>> {
            Ok(Conv2dParams {
                weight: f(&format!("{name}.weight"), &c.weight)?,
                bias: f(&format!("{name}.bias"), &c.bias)?,
            })
        };
        let lin = |f: &mut dyn FnMut(&str, &Tensor<E>) -> Result<Tensor<E>>,
                   name: &str,
                   l: &LinearParams<E>|
         -> Result<LinearParams<E>> {
            Ok(LinearParams {
                weight: f(&format!("{name}.weight"), &l.weight)?,
                bias: f(&format!("{name}.bias"), &l.bias)?,
            })
        };
        let ln = |f: &mut dyn FnMut(&str, &Tensor<E>) -> Result<Tensor<E>>,
                  name: &str,
                  l: &LayerNormParams<E>|
         -> Result<LayerNormParams<E>> {
            Ok(LayerNormParams {
                gamma: f(&format!("{name}.gamma"), &l.gamma)?,
                beta: f(&format!("{name}.beta"), &l.beta)?,
            })
        };
        let blk = |f: &mut dyn FnMut(&str, &Tensor<E>) -> Result<Tensor<E>>,
                   name: &str,
                   b: &BlockParams<E>|
         -> Result<BlockParams<E>> {
            Ok(BlockParams {
                ln1: ln(f, &format!("{name}.ln1"), &b.ln1)?,
                ca: CaParams {
                    gate: conv(f, &format!("{name}.ca.gate"), &b.ca.gate)?,
                    mlp: conv(f, &format!("{name}.ca.mlp"), &b.ca.mlp)?,
                    restore: conv(f, &format!("{name}.ca.restore"), &b.ca.restore)?,
                },
                msa: MsaParams {
                    qkv: lin(f, &format!("{name}.msa.qkv"), &b.msa.qkv)?,
                    proj: lin(f, &format!("{name}.msa.proj"), &b.msa.proj)?,
                    rel_bias: match &b.msa.rel_bias {
                        Some(t) => Some(f(&format!("{name}.msa.rel_bias"), t)?),
                        None => None,
                    },
                },
                ln2: ln(f, &format!("{name}.ln2"), &b.ln2)?,
                gcffn: GcffnParams {
                    wp1: conv(f, &format!("{name}.gcffn.wp1"), &b.gcffn.wp1)?,
                    wd1: conv(f, &format!("{name}.gcffn.wd1"), &b.gcffn.wd1)?,
                    wp2: conv(f, &format!("{name}.gcffn.wp2"), &b.gcffn.wp2)?,
                    wd2: conv(f, &format!("{name}.gcffn.wd2"), &b.gcffn.wd2)?,
                    wp3: conv(f, &format!("{name}.gcffn.wp3"), &b.gcffn.wp3)?,
                },
            })
        };

        let mut encoder = Vec::with_capacity(4);
        let mut down = Vec::with_capacity(4);
        let embed = conv(f, "embed", &self.embed)?;
        for level in 1..=4usize {
            let blocks = self.encoder[level - 1]
                .iter()
                .enumerate()
                .map(|(i, b)| blk(f, &format!("enc{level}.block{i}"), b))
                .collect::<Result<Vec<_>>>()?;
            encoder.push(blocks);
            down.push(conv(f, &format!("down{level}"), &self.down[level - 1])?);
        }
        let bottleneck = self
            .bottleneck
            .iter()
            .enumerate()
            .map(|(i, b)| blk(f, &format!("bottleneck.block{i}"), b))
            .collect::<Result<Vec<_>>>()?;
        let mut up = Vec::with_capacity(4);
        let mut fuse = Vec::with_capacity(4);
        let mut decoder = Vec::with_capacity(4);
        for (j, level) in (1..=4usize).rev().enumerate() {
            up.push(conv(f, &format!("up{level}"), &self.up[j])?);
            fuse.push(conv(f, &format!("fuse{level}"), &self.fuse[j])?);
            let blocks = self.decoder[j]
                .iter()
                .enumerate()
                .map(|(i, b)| blk(f, &format!("dec{level}.block{i}"), b))
                .collect::<Result<Vec<_>>>()?;
            decoder.push(blocks);
        }
        let output = conv(f, "output", &self.output)?;
        Ok(ModelParams {
            embed,
            encoder,
            down,
            bottleneck,
            up,
            fuse,
            decoder,
            output,
        })
    }

    /// Track every parameter on `tape` for a training step.
    pub fn with_tape(&self, tape: &Tape<E>) -> Result<Self> {
        self.map_leaves(&mut |_, t| tape.watch(t))
    }

    /// Convert precision (used to run gradient checks at 64-bit).
    pub fn cast<F: Element>(&self, cfg: &ModelConfig) -> Result<ModelParams<F>> {
        let map: HashMap<String, Tensor<F>> = self
            .leaves()
            .into_iter()
            .map(|(n, t)| (n, t.cast::<F>()))
            .collect();
        let (params, missing, leftover) = ModelParams::from_named(cfg, map, true, 0)?;
        debug_assert!(missing.is_empty() && leftover.is_empty());
        Ok(params)
    }

    /// Collect gradients by parameter name after a backward pass.
    pub fn grads(&self, tape: &Tape<E>) -> HashMap<String, Tensor<E>> {
        let mut out = HashMap::new();
        self.visit(&mut |name, t| {
            if let Some(g) = tape.grad(t) {
                out.insert(name.to_string(), g);
            }
        });
        out
    }

    /// Names belonging to the MAEIP encoder (embedding through bottleneck,
    /// including the downsampling convs).
    pub fn is_encoder_name(name: &str) -> bool {
        name.starts_with("embed")
            || name.starts_with("enc")
            || name.starts_with("down")
            || name.starts_with("bottleneck")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = ModelConfig::nano();
        let a = ModelParams::<f32>::init(&cfg, 7).unwrap();
        let b = ModelParams::<f32>::init(&cfg, 7).unwrap();
        for ((na, ta), (nb, tb)) in a.leaves().into_iter().zip(b.leaves()) {
            assert_eq!(na, nb);
            assert!(ta.bit_eq(&tb), "{na} differs");
        }
        let c = ModelParams::<f32>::init(&cfg, 8).unwrap();
        let diff = a
            .leaves()
            .iter()
            .zip(c.leaves())
            .any(|((_, ta), (_, tc))| !ta.bit_eq(&tc));
        assert!(diff, "different seeds must differ");
    }

    #[test]
    fn count_matches_materialized_params() {
        for cfg in [ModelConfig::nano(), ModelConfig::toy()] {
            let params = ModelParams::<f32>::init(&cfg, 0).unwrap();
            let total: usize = params.leaves().iter().map(|(_, t)| t.numel()).sum();
            assert_eq!(ModelParams::<f32>::count(&cfg).unwrap(), total);
        }
    }

    #[test]
    fn count_for_one_block_toy_matches_manual_arithmetic() {
        // C=2, one block per stage, 1 head everywhere, expansion 2, in=3.
        let mut cfg = ModelConfig::nano();
        cfg.base_channels = 2;
        cfg.heads_per_stage = [1, 1, 1, 1, 1];
        cfg.in_channels = 3;

        // Per-block params at width d (hidden = 2d, half = d/2):
        //   ln1+ln2: 4d
        //   ca: gate d*d+d, mlp half*half+half, restore d*half+d
        //   msa: qkv d*3d+3d, proj d*d+d
        //   gcffn: wp1 2d*d+2d, wd1 2d*9+2d, wp2 2d*d+2d, wd2 2d*9+2d, wp3 2d*d+d
        let block = |d: usize| {
            let half = d / 2;
            let hidden = 2 * d;
            4 * d
                + (d * d + d) + (half * half + half) + (d * half + d)
                + (d * 3 * d + 3 * d) + (d * d + d)
                + (hidden * d + hidden) * 2
                + (hidden * 9 + hidden) * 2
                + (d * hidden + d)
        };
        let widths = [2usize, 4, 8, 16, 32];
        let mut manual = 0usize;
        manual += 2 * 3 * 9 + 2; // embed 3x3: in=3 -> C=2
        for level in 0..4 {
            let c = widths[level];
            manual += block(c);
            manual += 2 * c * 4 * c + 2 * c; // down: 4c -> 2c
        }
        manual += block(widths[4]);
        for level in (0..4).rev() {
            let c = widths[level];
            manual += 4 * c * 2 * c + 4 * c; // up: 2c -> 4c
            manual += c * 2 * c + c; // fuse: 2c -> c
            manual += block(c);
        }
        manual += 3 * 2 * 9 + 3; // output 3x3: C=2 -> 3

        assert_eq!(ModelParams::<f32>::count(&cfg).unwrap(), manual);
    }

    #[test]
    fn doubling_c_roughly_quadruples_count() {
        let mut small = ModelConfig::nano();
        small.base_channels = 8;
        let mut big = ModelConfig::nano();
        big.base_channels = 16;
        let a = ModelParams::<f32>::count(&small).unwrap() as f64;
        let b = ModelParams::<f32>::count(&big).unwrap() as f64;
        let ratio = b / a;
        assert!((3.0..5.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn names_are_unique_and_stable_across_walks() {
        let cfg = ModelConfig::nano();
        let params = ModelParams::<f32>::init(&cfg, 1).unwrap();
        let leaves = params.leaves();
        let mut names: Vec<&str> = leaves.iter().map(|(n, _)| n.as_str()).collect();
        let total = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), total, "duplicate parameter names");

        // Builder-order names equal visit-order names.
        let map: HashMap<String, Tensor<f32>> = leaves.iter().cloned().collect();
        let (rebuilt, missing, leftover) =
            ModelParams::from_named(&cfg, map, true, 0).unwrap();
        assert!(missing.is_empty());
        assert!(leftover.is_empty());
        for ((na, ta), (nb, tb)) in params.leaves().into_iter().zip(rebuilt.leaves()) {
            assert_eq!(na, nb);
            assert!(ta.bit_eq(&tb));
        }
    }

    #[test]
    fn output_conv_starts_at_zero() {
        let params = ModelParams::<f32>::init(&ModelConfig::nano(), 3).unwrap();
        assert!(params.output.weight.data().iter().all(|&v| v == 0.0));
        assert!(params.output.bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_name_partition() {
        assert!(ModelParams::<f32>::is_encoder_name("embed.weight"));
        assert!(ModelParams::<f32>::is_encoder_name("enc3.block0.msa.qkv.weight"));
        assert!(ModelParams::<f32>::is_encoder_name("down2.bias"));
        assert!(ModelParams::<f32>::is_encoder_name("bottleneck.block0.ln1.gamma"));
        assert!(!ModelParams::<f32>::is_encoder_name("dec1.block0.ln1.gamma"));
        assert!(!ModelParams::<f32>::is_encoder_name("up4.weight"));
        assert!(!ModelParams::<f32>::is_encoder_name("fuse2.weight"));
        assert!(!ModelParams::<f32>::is_encoder_name("output.weight"));
    }
}
