use super::attention::{AttentionConfig, MaskMode, MultiHeadAttention};
use super::feedforward::{Mlp, MlpKind};
use super::norm::{Norm, NormKind};
use super::params::{ParamBuilder, Session};
use crate::tensor::Var;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct BlockConfig {
    pub d_model: usize,
    pub heads: usize,
    pub norm: NormKind,
    pub norm_eps: f64,
    pub mlp: MlpKind,
    pub d_hidden: usize,
    /// Rotary base for self-attention; `None` disables it.
    pub rope_base: Option<f64>,
    pub causal: bool,
    /// Adds a cross-attention sublayer reading from a context sequence.
    pub cross_attention: bool,
    /// Adds a feedforward sublayer between self- and cross-attention.
    pub self_ff: bool,
    pub dropout: f64,
}

/// Pre-norm transformer block:
///
/// ```text
/// x += SelfAttn(Norm(x))
/// x += FF(Norm(x))              (self_ff only)
/// x += CrossAttn(Norm(x), ctx)  (cross_attention only)
/// x += FF(Norm(x))
/// ```
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub attn_norm: Norm,
    pub attn: MultiHeadAttention,
    pub self_ff: Option<(Norm, Mlp)>,
    pub cross: Option<(Norm, MultiHeadAttention)>,
    pub ff_norm: Norm,
    pub ff: Mlp,
}

impl TransformerBlock {
    pub fn new(pb: &mut ParamBuilder, cfg: &BlockConfig) -> Result<Self> {
        let norm =
            |pb: &mut ParamBuilder, name: &str| Norm::new(pb, name, cfg.norm, cfg.d_model, cfg.norm_eps);
        let mlp = |pb: &mut ParamBuilder, name: &str| {
            pb.scope(name, |pb| {
                Mlp::new(pb, cfg.mlp, cfg.d_model, cfg.d_hidden, cfg.dropout)
            })
        };
        let attn_norm = norm(pb, "attn_norm");
        let attn = pb.scope("attn", |pb| {
            MultiHeadAttention::new(
                pb,
                AttentionConfig {
                    d_model: cfg.d_model,
                    heads: cfg.heads,
                    mask: if cfg.causal {
                        MaskMode::Causal
                    } else {
                        MaskMode::None
                    },
                    rope_base: cfg.rope_base,
                    dropout: cfg.dropout,
                },
            )
        })?;
        let self_ff = cfg
            .self_ff
            .then(|| (norm(pb, "self_ff_norm"), mlp(pb, "self_ff")));
        let cross = if cfg.cross_attention {
            let n = norm(pb, "cross_norm");
            let a = pb.scope("cross", |pb| {
                MultiHeadAttention::new(
                    pb,
                    AttentionConfig {
                        d_model: cfg.d_model,
                        heads: cfg.heads,
                        mask: MaskMode::None,
                        rope_base: None,
                        dropout: cfg.dropout,
                    },
                )
            })?;
            Some((n, a))
        } else {
            None
        };
        let ff_norm = norm(pb, "ff_norm");
        let ff = mlp(pb, "ff");
        Ok(Self {
            attn_norm,
            attn,
            self_ff,
            cross,
            ff_norm,
            ff,
        })
    }

    pub fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>, context: Option<Var<'t>>) -> Result<Var<'t>> {
        let h = self.attn.forward(s, self.attn_norm.forward(s, x)?, None)?;
        let mut x = x.add(&h)?;
        if let Some((norm, ff)) = &self.self_ff {
            x = x.add(&ff.forward(s, norm.forward(s, x)?)?)?;
        }
        match (&self.cross, context) {
            (Some((norm, cross)), Some(ctx)) => {
                x = x.add(&cross.forward(s, norm.forward(s, x)?, Some(ctx))?)?;
            }
            (Some(_), None) => {
                return Err(Error::invalid("block", "cross-attention block needs a context"));
            }
            (None, Some(_)) => {
                return Err(Error::invalid(
                    "block",
                    "context given to a block without cross-attention",
                ));
            }
            (None, None) => {}
        }
        x.add(&self.ff.forward(s, self.ff_norm.forward(s, x)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::feedforward::geglu_hidden;
    use crate::nn::params::{ParamSet, ParamSpec};
    use crate::tensor::{grad_check, Tape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grr(cross: bool) -> BlockConfig {
        BlockConfig {
            d_model: 8,
            heads: 2,
            norm: NormKind::Rms,
            norm_eps: 1e-6,
            mlp: MlpKind::Geglu,
            d_hidden: geglu_hidden(8, 2.7),
            rope_base: Some(10_000.0),
            causal: true,
            cross_attention: cross,
            self_ff: cross,
            dropout: 0.0,
        }
    }

    fn random_params(specs: &[ParamSpec], seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = specs
            .iter()
            .map(|s| Tensor::randn(s.shape.clone(), 0.3, &mut rng))
            .collect();
        ParamSet::from_tensors(specs, values).unwrap()
    }

    #[test]
    fn zeroed_output_projections_make_identity() {
        let mut pb = ParamBuilder::new();
        let block = TransformerBlock::new(&mut pb, &grr(true)).unwrap();
        let specs = pb.finish();
        let mut params = random_params(&specs, 1);
        for (i, spec) in specs.iter().enumerate() {
            let zero = [".o.weight", ".o.bias"].iter().any(|t| spec.name.ends_with(t));
            if zero {
                *params.tensor_mut(i) = Tensor::zeros(spec.shape.clone());
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(vec![4, 8], 1.0, &mut rng);
        let ctx = Tensor::randn(vec![3, 8], 1.0, &mut rng);
        let tape = Tape::new();
        let s = Session::new(&tape, &params);
        let y = block
            .forward(&s, tape.constant(x.clone()), Some(tape.constant(ctx)))
            .unwrap();
        assert_eq!(*y.value(), x);
    }

    #[test]
    fn context_changes_output() {
        let mut pb = ParamBuilder::new();
        let block = TransformerBlock::new(&mut pb, &grr(true)).unwrap();
        let params = random_params(&pb.finish(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(vec![4, 8], 1.0, &mut rng);
        let c1 = Tensor::randn(vec![3, 8], 1.0, &mut rng);
        let c2 = Tensor::randn(vec![3, 8], 1.0, &mut rng);
        let run = |c: &Tensor| {
            let tape = Tape::new();
            let s = Session::new(&tape, &params);
            let y = block
                .forward(&s, tape.constant(x.clone()), Some(tape.constant(c.clone())))
                .unwrap();
            (*y.value()).clone()
        };
        assert!(run(&c1).max_abs_diff(&run(&c2)) > 1e-6);
    }

    #[test]
    fn context_without_cross_attention_is_rejected() {
        let mut pb = ParamBuilder::new();
        let block = TransformerBlock::new(&mut pb, &grr(false)).unwrap();
        let params = random_params(&pb.finish(), 0);
        let tape = Tape::new();
        let s = Session::new(&tape, &params);
        let x = tape.constant(Tensor::zeros(vec![2, 8]));
        assert!(block.forward(&s, x, Some(x)).is_err());
    }

    #[test]
    fn grr_block_gradients() {
        let mut pb = ParamBuilder::new();
        let block = TransformerBlock::new(&mut pb, &grr(false)).unwrap();
        let specs = pb.finish();
        let params = random_params(&specs, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut inputs = vec![Tensor::randn(vec![4, 8], 1.0, &mut rng)];
        inputs.extend(params.tensors());
        let report = grad_check(
            |tape, v| {
                let s = Session::from_vars(tape, v[1..].to_vec());
                Ok(block.forward(&s, v[0], None)?.mul(&v[0])?.sum())
            },
            &inputs,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}
