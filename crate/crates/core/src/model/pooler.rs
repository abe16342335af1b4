use crate::nn::{
    AttentionConfig, Init, MaskMode, MultiHeadAttention, ParamBuilder, ParamId, Session, INIT_STD,
};
use crate::tensor::{Tensor, Var};
use crate::{Error, Result};

/// `n` learned queries attending over an input sequence: `[B, L, d] ->
/// [B, n, d]`.
#[derive(Clone, Debug)]
pub struct AttentionPooler {
    pub queries: ParamId,
    pub attn: MultiHeadAttention,
    pub n: usize,
    pub d_model: usize,
}

impl AttentionPooler {
    pub fn new(pb: &mut ParamBuilder, n: usize, d_model: usize, heads: usize, dropout: f64) -> Result<Self> {
        let queries = pb.add("queries", vec![n, d_model], Init::Normal(INIT_STD));
        let attn = pb.scope("attn", |pb| {
            MultiHeadAttention::new(
                pb,
                AttentionConfig {
                    d_model,
                    heads,
                    mask: MaskMode::None,
                    rope_base: None,
                    dropout,
                },
            )
        })?;
        Ok(Self {
            queries,
            attn,
            n,
            d_model,
        })
    }

    pub fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 3 || shape[2] != self.d_model {
            return Err(Error::invalid(
                "pooler",
                format!("expected [batch, len, {}], got {shape:?}", self.d_model),
            ));
        }
        // Broadcast the shared queries over the batch.
        let zeros = s.constant(Tensor::zeros(vec![shape[0], self.n, self.d_model]));
        let q = zeros.add(&s.param(self.queries))?;
        self.attn.forward(s, q, Some(x))
    }
}
