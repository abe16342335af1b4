use super::linear::Linear;
use super::params::{ParamBuilder, Session};
use super::rope::RopeConfig;
use crate::tensor::{Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    None,
    /// Position `t` may attend to positions `<= t` only.
    Causal,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub heads: usize,
    pub mask: MaskMode,
    /// Rotary base when queries and keys are rotated; `None` disables it.
    pub rope_base: Option<f64>,
    pub dropout: f64,
}

/// Multi-head scaled dot-product attention with per-head query, key and
/// value projections (packed into one matrix each) and an output
/// projection. Logits are scaled by `1/sqrt(head_dim)`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub head_dim: usize,
    pub mask: MaskMode,
    pub rope: Option<RopeConfig>,
    pub dropout: f64,
}

impl MultiHeadAttention {
    pub fn new(pb: &mut ParamBuilder, cfg: AttentionConfig) -> Result<Self> {
        let AttentionConfig { d_model, heads, .. } = cfg;
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::invalid(
                "attention",
                format!("d_model {d_model} not divisible by {heads} heads"),
            ));
        }
        let head_dim = d_model / heads;
        let rope = cfg
            .rope_base
            .map(|base| RopeConfig::new(head_dim, base))
            .transpose()?;
        Ok(Self {
            q: Linear::new(pb, "q", d_model, d_model, true),
            k: Linear::new(pb, "k", d_model, d_model, true),
            v: Linear::new(pb, "v", d_model, d_model, true),
            o: Linear::new(pb, "o", d_model, d_model, true),
            heads,
            head_dim,
            mask: cfg.mask,
            rope,
            dropout: cfg.dropout,
        })
    }

    pub fn num_params(d_model: usize) -> usize {
        4 * (d_model * d_model + d_model)
    }

    /// Self-attention when `context` is `None`, otherwise queries from `x`
    /// and keys/values from `context`. Inputs are `[..., seq, d_model]` with
    /// matching leading axes.
    pub fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>, context: Option<Var<'t>>) -> Result<Var<'t>> {
        self.forward_at(s, x, context, 0)
    }

    /// Like [`forward`](Self::forward) with sequence positions starting at
    /// `offset` instead of 0.
    pub fn forward_at<'t>(
        &self,
        s: &Session<'t>,
        x: Var<'t>,
        context: Option<Var<'t>>,
        offset: usize,
    ) -> Result<Var<'t>> {
        if self.mask == MaskMode::Causal && context.is_some() {
            return Err(Error::invalid(
                "attention",
                "causal masking needs queries and keys from the same sequence",
            ));
        }
        let xq_shape = x.shape();
        let kv = context.unwrap_or(x);
        let kv_shape = kv.shape();
        let r = xq_shape.len();
        if r < 2 || kv_shape.len() != r || xq_shape[..r - 2] != kv_shape[..r - 2] {
            return Err(Error::shape("attention", &xq_shape, &kv_shape));
        }
        let (sq, sk) = (xq_shape[r - 2], kv_shape[r - 2]);
        let q_pos: Vec<usize> = (offset..offset + sq).collect();
        let k_pos: Vec<usize> = (offset..offset + sk).collect();

        let q = self.split_heads(self.q.forward(s, x)?, &q_pos)?;
        let k = self.split_heads(self.k.forward(s, kv)?, &k_pos)?;
        let v = self.split_heads_plain(self.v.forward(s, kv)?)?;

        let mut logits = q
            .matmul(&k.transpose()?)?
            .scale(1.0 / (self.head_dim as f64).sqrt());
        if self.mask == MaskMode::Causal {
            let mask = Tensor::from_fn(vec![sq, sk], |i| {
                if i % sk > i / sk {
                    f64::NEG_INFINITY
                } else {
                    0.0
                }
            });
            logits = logits.add(&s.constant(mask))?;
        }
        let weights = logits.softmax()?;
        let ctx = weights.matmul(&v)?;
        let ctx = self.merge_heads(ctx)?;
        let out = self.o.forward(s, ctx)?;
        s.dropout(out, self.dropout)
    }

    /// `[..., seq, d] -> [..., heads, seq, head_dim]`, rotating when RoPE is
    /// configured.
    fn split_heads<'t>(&self, x: Var<'t>, positions: &[usize]) -> Result<Var<'t>> {
        let x = self.to_heads(x)?;
        let x = match &self.rope {
            Some(rope) => rope.apply(x, positions)?,
            None => x,
        };
        self.heads_first(x)
    }

    fn split_heads_plain<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        self.heads_first(self.to_heads(x)?)
    }

    fn to_heads<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let mut split = shape[..shape.len() - 1].to_vec();
        split.extend([self.heads, self.head_dim]);
        x.reshape(&split)
    }

    fn heads_first<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let r = x.shape().len();
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 3, r - 2);
        x.permute(&perm)
    }

    fn merge_heads<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let x = self.heads_first(x)?;
        let shape = x.shape();
        let mut merged = shape[..shape.len() - 2].to_vec();
        merged.push(self.heads * self.head_dim);
        x.reshape(&merged)
    }
}
