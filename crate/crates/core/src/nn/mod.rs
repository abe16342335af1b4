//! Layers: feedforwards, norms, rotary embeddings, attention, transformer
//! blocks and embeddings. Every layer is a plain struct of [`ParamId`]s
//! evaluated against a [`Session`].

pub mod attention;
pub mod block;
pub mod embed;
pub mod feedforward;
pub mod linear;
pub mod norm;
pub mod params;
pub mod rope;

pub use attention::{AttentionConfig, MaskMode, MultiHeadAttention};
pub use block::{BlockConfig, TransformerBlock};
pub use embed::{Embedding, PatchEmbed};
pub use feedforward::{geglu_hidden, plain_hidden, FeedForward, Geglu, Mlp, MlpKind};
pub use linear::{Linear, INIT_STD};
pub use norm::{l2_normalize, Norm, NormKind};
pub use params::{Init, Param, ParamBuilder, ParamId, ParamSet, ParamSpec, Session};
pub use rope::{RopeConfig, DEFAULT_ROPE_BASE};
