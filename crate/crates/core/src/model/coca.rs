use super::config::{EncoderVariant, ModelConfig};
use super::pooler::AttentionPooler;
use crate::data::{BOS, EOS, PAD};
use crate::nn::{
    l2_normalize, BlockConfig, Embedding, Init, Linear, MlpKind, Norm, NormKind, ParamBuilder, ParamId,
    ParamSet, ParamSpec, PatchEmbed, Session, TransformerBlock, INIT_STD,
};
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Vision encoder: patchify, optional absolute positions, blocks, final
/// norm.
#[derive(Clone, Debug)]
pub struct VisualEncoder {
    pub patch: PatchEmbed,
    pub positions: Option<ParamId>,
    pub blocks: Vec<TransformerBlock>,
    pub norm: Norm,
}

/// Causal text stack; the multimodal one also cross-attends.
#[derive(Clone, Debug)]
pub struct TextDecoder {
    pub blocks: Vec<TransformerBlock>,
    pub norm: Norm,
}

impl TextDecoder {
    fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>, context: Option<Var<'t>>) -> Result<Var<'t>> {
        let mut x = x;
        for block in &self.blocks {
            x = block.forward(s, x, context)?;
        }
        self.norm.forward(s, x)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Pooled<'t> {
    /// `[B, gen_pool_queries, d_model]`, read by the multimodal decoder.
    pub gen: Var<'t>,
    /// `[B, d_model]`, unit norm.
    pub con: Var<'t>,
}

#[derive(Clone, Copy, Debug)]
pub struct TextStates<'t> {
    /// `[B, context_len, d_model]`.
    pub states: Var<'t>,
    /// `[B, d_model]` state at the CLS slot, unit norm.
    pub cls: Var<'t>,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput<'t> {
    pub image_latent: Var<'t>,
    pub text_latent: Var<'t>,
    /// `[B, context_len, vocab_size]`.
    pub logits: Var<'t>,
    /// Scalar contrastive temperature.
    pub temperature: Var<'t>,
}

/// The assembled contrastive captioner. Holds layer structure and the
/// parameter registry; values live in a separate [`ParamSet`].
#[derive(Clone, Debug)]
pub struct CoCaModel {
    pub config: ModelConfig,
    specs: Vec<ParamSpec>,
    pub encoder: VisualEncoder,
    pub gen_pooler: AttentionPooler,
    pub con_pooler: AttentionPooler,
    pub token_embedding: Embedding,
    pub unimodal: TextDecoder,
    pub multimodal: TextDecoder,
    pub lm_head: Linear,
    pub log_temperature: ParamId,
}

impl CoCaModel {
    /// Builds the layer structure and registry. No parameter storage is
    /// allocated.
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut pb = ParamBuilder::new();

        let grr_block = BlockConfig {
            d_model: c.d_model,
            heads: c.heads,
            norm: NormKind::Rms,
            norm_eps: NormKind::Rms.default_eps(),
            mlp: MlpKind::Geglu,
            d_hidden: c.geglu_hidden(),
            rope_base: Some(c.rope_base),
            causal: true,
            cross_attention: false,
            self_ff: false,
            dropout: c.dropout,
        };
        let enc_block = match c.encoder_variant {
            EncoderVariant::Grr => BlockConfig {
                causal: false,
                ..grr_block
            },
            EncoderVariant::Baseline => BlockConfig {
                norm: NormKind::Layer,
                norm_eps: NormKind::Layer.default_eps(),
                mlp: MlpKind::Plain,
                d_hidden: c.ff_hidden(),
                rope_base: None,
                causal: false,
                ..grr_block
            },
        };
        let multi_block = BlockConfig {
            cross_attention: true,
            self_ff: c.multimodal_self_ff,
            ..grr_block
        };
        let stack = |pb: &mut ParamBuilder, cfg: &BlockConfig| -> Result<Vec<TransformerBlock>> {
            (0..c.blocks_per_submodel)
                .map(|i| pb.scope(format!("blocks.{i}"), |pb| TransformerBlock::new(pb, cfg)))
                .collect()
        };

        let encoder = pb.scope("encoder", |pb| -> Result<_> {
            let patch = PatchEmbed::new(pb, "patch_embed", c.channels, c.patch_size, c.d_model);
            let positions = (c.encoder_variant == EncoderVariant::Baseline).then(|| {
                pb.add(
                    "pos_embed",
                    vec![c.num_patches(), c.d_model],
                    Init::Normal(INIT_STD),
                )
            });
            let blocks = stack(pb, &enc_block)?;
            let norm = Norm::new(pb, "norm", enc_block.norm, c.d_model, enc_block.norm_eps);
            Ok(VisualEncoder {
                patch,
                positions,
                blocks,
                norm,
            })
        })?;
        let gen_pooler = pb.scope("gen_pooler", |pb| {
            AttentionPooler::new(pb, c.gen_pool_queries, c.d_model, c.heads, c.dropout)
        })?;
        let con_pooler = pb.scope("con_pooler", |pb| {
            AttentionPooler::new(pb, 1, c.d_model, c.heads, c.dropout)
        })?;
        let token_embedding = Embedding::new(&mut pb, "token_embedding", c.vocab_size, c.d_model);
        let decoder = |pb: &mut ParamBuilder, name: &str, cfg: &BlockConfig| {
            pb.scope(name, |pb| -> Result<_> {
                Ok(TextDecoder {
                    blocks: stack(pb, cfg)?,
                    norm: Norm::new(pb, "norm", cfg.norm, c.d_model, cfg.norm_eps),
                })
            })
        };
        let unimodal = decoder(&mut pb, "unimodal", &grr_block)?;
        let multimodal = decoder(&mut pb, "multimodal", &multi_block)?;
        let lm_head = Linear::new(&mut pb, "lm_head", c.d_model, c.vocab_size, true);
        let log_temperature = pb.add("log_temperature", vec![1], Init::Const(c.temperature_init.ln()));

        Ok(Self {
            config: c.clone(),
            specs: pb.finish(),
            encoder,
            gen_pooler,
            con_pooler,
            token_embedding,
            unimodal,
            multimodal,
            lm_head,
            log_temperature,
        })
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn init_params(&self, seed: u64) -> ParamSet {
        ParamSet::init(&self.specs, seed)
    }

    pub fn num_parameters(&self) -> usize {
        self.specs.iter().map(ParamSpec::numel).sum()
    }

    /// `[B, C, H, W] -> [B, num_patches, d_model]`.
    pub fn encode_image<'t>(&self, s: &Session<'t>, images: Var<'t>) -> Result<Var<'t>> {
        let c = &self.config;
        let shape = images.shape();
        let expect = [c.channels, c.image_size, c.image_size];
        if shape.len() != 4 || shape[1..] != expect {
            return Err(Error::invalid(
                "encode_image",
                format!(
                    "expected [batch, {}, {}, {}], got {shape:?}",
                    expect[0], expect[1], expect[2]
                ),
            ));
        }
        let enc = &self.encoder;
        let mut x = enc.patch.forward(s, images)?;
        if let Some(pos) = enc.positions {
            x = x.add(&s.param(pos))?;
        }
        for block in &enc.blocks {
            x = block.forward(s, x, None)?;
        }
        enc.norm.forward(s, x)
    }

    /// Generative pooling then contrastive pooling of its output.
    pub fn pool<'t>(&self, s: &Session<'t>, patches: Var<'t>) -> Result<Pooled<'t>> {
        let gen = self.gen_pooler.forward(s, patches)?;
        let con = self.con_pooler.forward(s, gen)?;
        let batch = con.shape()[0];
        let con = l2_normalize(con.reshape(&[batch, self.config.d_model])?)?;
        Ok(Pooled { gen, con })
    }

    /// Unimodal decoder over `batch` rows of `context_len` ids.
    pub fn encode_text<'t>(&self, s: &Session<'t>, ids: &[usize], batch: usize) -> Result<TextStates<'t>> {
        let c = &self.config;
        if batch == 0 || ids.len() != batch * c.context_len {
            return Err(Error::invalid(
                "encode_text",
                format!(
                    "{} ids for {batch} rows of context length {}",
                    ids.len(),
                    c.context_len
                ),
            ));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t >= c.vocab_size) {
            return Err(Error::invalid(
                "encode_text",
                format!("token id {bad} out of range for vocabulary of {}", c.vocab_size),
            ));
        }
        let x = self.token_embedding.forward(s, ids, batch)?;
        let states = self.unimodal.forward(s, x, None)?;
        let last = states.narrow(1, c.context_len - 1, 1)?;
        let cls = l2_normalize(last.reshape(&[batch, c.d_model])?)?;
        Ok(TextStates { states, cls })
    }

    /// Multimodal decoder and vocabulary projection.
    pub fn decode_multimodal<'t>(&self, s: &Session<'t>, states: Var<'t>, gen: Var<'t>) -> Result<Var<'t>> {
        let shape = states.shape();
        if shape.len() != 3 || shape[1] != self.config.context_len {
            return Err(Error::invalid(
                "decode_multimodal",
                format!(
                    "expected [batch, {}, {}], got {shape:?}",
                    self.config.context_len, self.config.d_model
                ),
            ));
        }
        let h = self.multimodal.forward(s, states, Some(gen))?;
        self.lm_head.forward(s, h)
    }

    pub fn temperature<'t>(&self, s: &Session<'t>) -> Var<'t> {
        s.param(self.log_temperature).exp()
    }

    pub fn forward<'t>(&self, s: &Session<'t>, images: Var<'t>, ids: &[usize]) -> Result<ForwardOutput<'t>> {
        let batch = images.shape()[0];
        let patches = self.encode_image(s, images)?;
        let pooled = self.pool(s, patches)?;
        let text = self.encode_text(s, ids, batch)?;
        let logits = self.decode_multimodal(s, text.states, pooled.gen)?;
        Ok(ForwardOutput {
            image_latent: pooled.con,
            text_latent: text.cls,
            logits,
            temperature: self.temperature(s),
        })
    }

    /// Greedy decoding from BOS for one `[C, H, W]` image. Stops after EOS
    /// or at `max_len` tokens (BOS included).
    pub fn generate_caption(&self, params: &ParamSet, image: &Tensor, max_len: usize) -> Result<Vec<usize>> {
        let c = &self.config;
        if max_len == 0 || max_len > c.context_len {
            return Err(Error::invalid(
                "generate_caption",
                format!("max_len {max_len} must be in 1..={}", c.context_len),
            ));
        }
        let tape = Tape::new();
        let s = Session::inference(&tape, params);
        let mut shape = vec![1];
        shape.extend_from_slice(image.shape());
        let img = tape.constant(image.clone().reshape(shape)?);
        let gen = self.pool(&s, self.encode_image(&s, img)?)?.gen;
        let vocab = c.vocab_size;

        let mut tokens = vec![BOS];
        while tokens.len() < max_len {
            let mut ids = tokens.clone();
            ids.resize(c.context_len, PAD);
            // Causal attention keeps the trailing padding invisible to the
            // slots that are read.
            let text = self.encode_text(&s, &ids, 1)?;
            let logits = self.decode_multimodal(&s, text.states, gen)?.value();
            let at = tokens.len() - 1;
            let row = &logits.data()[at * vocab..(at + 1) * vocab];
            let next = argmax(row);
            tokens.push(next);
            if next == EOS {
                break;
            }
        }
        Ok(tokens)
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
