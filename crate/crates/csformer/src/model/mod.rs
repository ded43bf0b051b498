//! The CSformer model: shallow embedding, five-level symmetric
//! encoder-decoder of channel-attention + windowed-self-attention blocks,
//! pixel-(un)shuffle resampling, skip fusion, and the residual output head.

mod attention;
mod block;
pub mod checkpoint;
mod config;
mod forward;
pub(crate) mod params;

pub use attention::{global_msa, rel_index_map, window_msa};
pub use block::{channel_attention, csformer_block, gcffn, AttnKind, LevelCtx};
pub use config::{AttnMode, CaWiring, ModelConfig};
pub use forward::{
    downsample, forward_encoder, model_forward, shallow_embed, skip_fuse, upsample,
    ForwardOutputs,
};
pub use params::{
    BlockParams, CaParams, Conv2dParams, GcffnParams, LayerNormParams, LinearParams, ModelParams,
    MsaParams,
};
