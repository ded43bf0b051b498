use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Attention flavor of one encoder/decoder level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttnMode {
    Windowed,
    Global,
}

/// How the channel-attention and MSA branches combine inside a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CaWiring {
    /// Both branches read LN(x); their outputs are summed.
    #[default]
    Parallel,
    /// CA consumes the MSA output.
    Sequential,
}

/// Architecture hyperparameters. Channel widths per level are C, 2C, 4C, 8C,
/// 16C at spatial scales 1, 1/2, 1/4, 1/8, 1/16.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub base_channels: usize,
    /// Blocks per stage: 4 encoder stages (shallow to deep), bottleneck,
    /// then 4 decoder stages (deep to shallow).
    pub blocks_per_stage: [usize; 9],
    /// Attention heads by depth level (1..=5).
    pub heads_per_stage: [usize; 5],
    #[serde(default = "default_window")]
    pub window_size: usize,
    #[serde(default = "default_expansion")]
    pub gcffn_expansion: f64,
    #[serde(default = "default_attn_modes")]
    pub attn_mode_per_level: [AttnMode; 5],
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    /// When true the I -> output residual skip is removed (MAEIP).
    #[serde(default)]
    pub pretrain_mode: bool,
    #[serde(default)]
    pub ca_wiring: CaWiring,
    /// Learned relative position bias inside windowed attention (off by
    /// default; the equivalence oracles stay simpler without it).
    #[serde(default)]
    pub rel_pos_bias: bool,
}

fn default_window() -> usize {
    8
}
fn default_expansion() -> f64 {
    2.0
}
fn default_attn_modes() -> [AttnMode; 5] {
    [
        AttnMode::Windowed,
        AttnMode::Windowed,
        AttnMode::Windowed,
        AttnMode::Windowed,
        AttnMode::Global,
    ]
}
fn default_in_channels() -> usize {
    3
}

impl ModelConfig {
    /// Smallest variant: C = 8, one block per stage.
    pub fn nano() -> Self {
        ModelConfig {
            base_channels: 8,
            blocks_per_stage: [1; 9],
            heads_per_stage: [1, 2, 4, 8, 16],
            window_size: default_window(),
            gcffn_expansion: default_expansion(),
            attn_mode_per_level: default_attn_modes(),
            in_channels: 3,
            pretrain_mode: false,
            ca_wiring: CaWiring::Parallel,
            rel_pos_bias: false,
        }
    }

    /// Toy variant: C = 16, two blocks per stage.
    pub fn toy() -> Self {
        ModelConfig {
            base_channels: 16,
            blocks_per_stage: [2; 9],
            ..ModelConfig::nano()
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "nano" => Ok(ModelConfig::nano()),
            "toy" => Ok(ModelConfig::toy()),
            other => Err(Error::Config(format!(
                "unknown model variant `{other}` (expected nano or toy)"
            ))),
        }
    }

    /// Channel width at depth level 1..=5.
    pub fn width(&self, level: usize) -> usize {
        debug_assert!((1..=5).contains(&level));
        self.base_channels << (level - 1)
    }

    pub fn heads(&self, level: usize) -> usize {
        self.heads_per_stage[level - 1]
    }

    /// GCFFN hidden width for a block of width d.
    pub fn gcffn_hidden(&self, d: usize) -> usize {
        (self.gcffn_expansion * d as f64).round() as usize
    }

    /// Blocks at encoder level 1..=4.
    pub fn encoder_blocks(&self, level: usize) -> usize {
        self.blocks_per_stage[level - 1]
    }

    pub fn bottleneck_blocks(&self) -> usize {
        self.blocks_per_stage[4]
    }

    /// Blocks at decoder level 4..=1 (stage order deep to shallow).
    pub fn decoder_blocks(&self, level: usize) -> usize {
        self.blocks_per_stage[4 + (5 - level)]
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.base_channels % 2 != 0 {
            return Err(Error::Config(format!(
                "base_channels must be a positive even number, got {}",
                self.base_channels
            )));
        }
        if self.window_size < 2 {
            return Err(Error::Config("window_size must be at least 2".into()));
        }
        if self.gcffn_expansion <= 0.0 {
            return Err(Error::Config("gcffn_expansion must be positive".into()));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        for level in 1..=5 {
            let d = self.width(level);
            let h = self.heads(level);
            if h == 0 || d % h != 0 {
                return Err(Error::Config(format!(
                    "heads ({h}) must divide channel width ({d}) at level {level}"
                )));
            }
        }
        for level in 1..=4 {
            if self.attn_mode_per_level[level - 1] != AttnMode::Windowed {
                return Err(Error::Config(format!(
                    "level {level} must use windowed attention"
                )));
            }
        }
        if self.attn_mode_per_level[4] != AttnMode::Global {
            return Err(Error::Config("bottleneck level must use global attention".into()));
        }
        Ok(())
    }
}
