//! Contrastive captioner (CoCa) whose vision encoder and text decoders use
//! GEGLU feedforwards, RMS normalization and rotary position embeddings,
//! together with the dual-loss training recipe, at desk scale.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`]: dense `f64` tensors, a reverse-mode tape and a
//!   finite-difference gradient checker.
//! - [`nn`]: parameter registry and the layer inventory (feedforwards,
//!   norms, rotary embeddings, attention, pre-norm blocks, patch embedding).
//! - [`model`]: the assembled captioner, poolers, parameter counting,
//!   checkpoints and greedy captioning.
//! - [`objectives`]: contrastive loss, captioning cross-entropy, perplexity
//!   and the weighted joint loss.
//! - [`training`]: AdamW, clipping, warmup plus cosine restarts, the early
//!   stopper with soft resets, and the training loop.
//! - [`data`]: tokenizers, the token layout, image preprocessing, manifests,
//!   synthetic data and batching.
//!
//! With the default `parallel` feature, matrix kernels, gradient checks,
//! micro-batch gradients and validation batches are spread over a rayon
//! pool. Results are bit-identical with and without the feature.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod gradsuite;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod par;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
