//! Caption tokenization and layout, image preprocessing, manifests,
//! synthetic data and batching.

mod batch;
mod image;
mod layout;
mod manifest;
mod synth;
mod tokenizer;

pub use batch::{epoch_order, make_batches, Batch};
pub use image::{
    load_image, preprocess, resize_bilinear, ImagePipelineConfig, RgbPlanes, IMAGENET_MEAN, IMAGENET_STD,
};
pub use layout::{check_layout, decode_caption, encode_caption, TokenLayout};
pub use manifest::{ManifestDataset, ManifestRecord, Sample};
pub use synth::{synth_items, synth_samples, write_synth_dataset, SynthItem, COLORS, SHAPES};
pub use tokenizer::{
    is_special, ByteTokenizer, Tokenizer, VocabTokenizer, BOS, CLS, EOS, IGNORED_TARGETS, PAD,
    RESERVED_TOKENS,
};
