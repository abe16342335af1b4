//! The contrastive captioner: vision encoder, attention poolers, unimodal
//! and multimodal text decoders, parameter counting and checkpoints.

mod checkpoint;
mod coca;
mod config;
mod count;
mod pooler;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, Checkpoint, Header, TensorEntry, MAGIC,
};
pub use coca::{CoCaModel, ForwardOutput, Pooled, TextDecoder, TextStates, VisualEncoder};
pub use config::{EncoderVariant, ModelConfig};
pub use count::{count_parameters, ParamCount};
pub use pooler::AttentionPooler;
