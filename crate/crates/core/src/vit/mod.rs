//! Patch tokenisation, positional tables and the transformer stacks.

mod config;
mod decoder;
mod encoder;
mod layers;
mod pos;

pub use config::{default_tap_layer, ViTConfig};
pub use decoder::Decoder;
pub use encoder::{extract_patches, Encoder, EncoderOutput, TokenSequence};
pub use layers::{Block, LayerNorm, Linear, LN_EPS};
pub use pos::sincos_positions;
