//! CSformer: an image-restoration transformer mixing channel attention with
//! window-based self-attention, plus masked-autoencoder pre-training, built
//! on a small reverse-mode tensor core.

pub mod error;
pub mod inference;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};
