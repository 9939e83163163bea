//! Transformer building blocks.

pub mod attention;
pub mod block;
pub mod head;
pub mod params;
pub mod patch;

pub use attention::{attention_weights, scaled_attention, MultiHeadAttention};
pub use block::{ClassAttentionBlock, EncoderBlock, LayerNorm, LayerScale, Linear, Mlp};
pub use head::{softmax_row, LinearHead, MlpHead, N_CLASSES};
pub use params::{Bound, Init, ParamId, ParamStore};
pub use patch::{patchify, unpatchify, PatchEmbedding, TokenLayout, CHANNELS};
