//! Finite-difference checks of every layer kind and both losses on small
//! random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::IGNORED_TARGETS;
use crate::model::AttentionPooler;
use crate::nn::{
    geglu_hidden, l2_normalize, AttentionConfig, BlockConfig, FeedForward, Geglu, MaskMode, MlpKind,
    MultiHeadAttention, Norm, NormKind, ParamBuilder, PatchEmbed, Session, TransformerBlock,
};
use crate::objectives::{caption_loss, contrastive_loss};
use crate::tensor::{
    analytic_gradients, compare_gradients, numeric_gradients, GradCheckReport, Tape, Tensor, Var,
};
use crate::{Error, Result};

/// Central-difference step.
pub const STEP: f64 = 1e-5;

pub const LAYERS: [&str; 12] = [
    "geglu",
    "feedforward",
    "rms_norm",
    "layer_norm",
    "rope_attention",
    "cross_attention",
    "grr_block",
    "baseline_block",
    "pooler",
    "patch_embed",
    "contrastive_loss",
    "caption_loss",
];

const D: usize = 8;
const HEADS: usize = 2;

#[derive(Clone, Debug)]
pub struct LayerCheck {
    pub layer: &'static str,
    pub seed: u64,
    pub report: GradCheckReport,
}

/// Data inputs followed by randomly drawn parameters.
struct Instance {
    inputs: Vec<Tensor>,
    data_inputs: usize,
}

fn instance(pb: ParamBuilder, data: Vec<Tensor>, rng: &mut ChaCha8Rng) -> Instance {
    let data_inputs = data.len();
    let mut inputs = data;
    inputs.extend(
        pb.finish()
            .iter()
            .map(|s| Tensor::randn(s.shape.clone(), 0.3, rng)),
    );
    Instance { inputs, data_inputs }
}

/// `mean(y ⊙ w)`. Averaging keeps finite-difference rounding noise far
/// below the comparison floor for parameters whose exact gradient is zero
/// (the key bias of attention without rotary embeddings).
fn weighted_mean<'t>(y: Var<'t>, w: &Tensor) -> Result<Var<'t>> {
    Ok(y.mul(&y.tape().constant(w.clone()))?.mean())
}

fn attention(mask: MaskMode, rope: bool) -> AttentionConfig {
    AttentionConfig {
        d_model: D,
        heads: HEADS,
        mask,
        rope_base: rope.then_some(10_000.0),
        dropout: 0.0,
    }
}

fn block(kind: &str) -> BlockConfig {
    let grr = kind == "grr_block";
    BlockConfig {
        d_model: D,
        heads: HEADS,
        norm: if grr { NormKind::Rms } else { NormKind::Layer },
        norm_eps: if grr { 1e-6 } else { 1e-5 },
        mlp: if grr { MlpKind::Geglu } else { MlpKind::Plain },
        d_hidden: if grr { geglu_hidden(D, 2.7) } else { 4 * D },
        rope_base: grr.then_some(10_000.0),
        causal: grr,
        cross_attention: grr,
        self_ff: grr,
        dropout: 0.0,
    }
}

fn check<F>(f: F, inst: &Instance, tol: f64, inject: bool) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> + Sync,
{
    let mut analytic = analytic_gradients(&f, &inst.inputs)?;
    let numeric = numeric_gradients(&f, &inst.inputs, STEP)?;
    if inject {
        // Negative control: a 1% error in one analytic gradient.
        for x in analytic[0].data_mut() {
            *x *= 1.01;
        }
    }
    Ok(compare_gradients(&analytic, &numeric, tol))
}

/// Gradient check of one layer kind at `seed`. With `inject`, the analytic
/// gradient of the first input is deliberately perturbed, so the check must
/// fail.
pub fn check_layer(layer: &str, seed: u64, tol: f64, inject: bool) -> Result<LayerCheck> {
    let name = LAYERS
        .iter()
        .copied()
        .find(|l| *l == layer)
        .ok_or_else(|| Error::invalid("grad_check", format!("unknown layer {layer}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pb = ParamBuilder::new();
    let x = |rng: &mut ChaCha8Rng, shape: &[usize]| Tensor::randn(shape.to_vec(), 1.0, rng);

    let report = match name {
        "geglu" | "feedforward" | "rms_norm" | "layer_norm" => {
            enum L {
                G(Geglu),
                F(FeedForward),
                N(Norm),
            }
            let layer = match name {
                "geglu" => L::G(Geglu::new(&mut pb, D, geglu_hidden(D, 2.7), 0.0)),
                "feedforward" => L::F(FeedForward::new(&mut pb, D, 4 * D, 0.0)),
                "rms_norm" => L::N(Norm::new(&mut pb, "n", NormKind::Rms, D, 1e-6)),
                _ => L::N(Norm::new(&mut pb, "n", NormKind::Layer, D, 1e-5)),
            };
            let input = x(&mut rng, &[2, 3, D]);
            let w = x(&mut rng, &[2, 3, D]);
            let inst = instance(pb, vec![input], &mut rng);
            let k = inst.data_inputs;
            check(
                |tape, v| {
                    let s = Session::from_vars(tape, v[k..].to_vec());
                    let y = match &layer {
                        L::G(g) => g.forward(&s, v[0])?,
                        L::F(f) => f.forward(&s, v[0])?,
                        L::N(n) => n.forward(&s, v[0])?,
                    };
                    weighted_mean(y, &w)
                },
                &inst,
                tol,
                inject,
            )?
        }
        "rope_attention" | "cross_attention" => {
            let cross = name == "cross_attention";
            let attn = if cross {
                MultiHeadAttention::new(&mut pb, attention(MaskMode::None, false))?
            } else {
                MultiHeadAttention::new(&mut pb, attention(MaskMode::Causal, true))?
            };
            let mut data = vec![x(&mut rng, &[2, 4, D])];
            if cross {
                data.push(x(&mut rng, &[2, 5, D]));
            }
            let w = x(&mut rng, &[2, 4, D]);
            let inst = instance(pb, data, &mut rng);
            let k = inst.data_inputs;
            check(
                |tape, v| {
                    let s = Session::from_vars(tape, v[k..].to_vec());
                    let ctx = cross.then(|| v[1]);
                    weighted_mean(attn.forward(&s, v[0], ctx)?, &w)
                },
                &inst,
                tol,
                inject,
            )?
        }
        "grr_block" | "baseline_block" => {
            let cfg = block(name);
            let b = TransformerBlock::new(&mut pb, &cfg)?;
            let mut data = vec![x(&mut rng, &[2, 4, D])];
            if cfg.cross_attention {
                data.push(x(&mut rng, &[2, 3, D]));
            }
            let w = x(&mut rng, &[2, 4, D]);
            let inst = instance(pb, data, &mut rng);
            let k = inst.data_inputs;
            check(
                |tape, v| {
                    let s = Session::from_vars(tape, v[k..].to_vec());
                    let ctx = cfg.cross_attention.then(|| v[1]);
                    weighted_mean(b.forward(&s, v[0], ctx)?, &w)
                },
                &inst,
                tol,
                inject,
            )?
        }
        "pooler" => {
            let pool = AttentionPooler::new(&mut pb, 3, D, HEADS, 0.0)?;
            let input = x(&mut rng, &[2, 5, D]);
            let w = x(&mut rng, &[2, 3, D]);
            let inst = instance(pb, vec![input], &mut rng);
            check(
                |tape, v| {
                    let s = Session::from_vars(tape, v[1..].to_vec());
                    weighted_mean(pool.forward(&s, v[0])?, &w)
                },
                &inst,
                tol,
                inject,
            )?
        }
        "patch_embed" => {
            let pe = PatchEmbed::new(&mut pb, "patch", 3, 4, D);
            let input = x(&mut rng, &[1, 3, 8, 8]);
            let w = x(&mut rng, &[1, 4, D]);
            let inst = instance(pb, vec![input], &mut rng);
            check(
                |tape, v| {
                    let s = Session::from_vars(tape, v[1..].to_vec());
                    weighted_mean(pe.forward(&s, v[0])?, &w)
                },
                &inst,
                tol,
                inject,
            )?
        }
        "contrastive_loss" => {
            let inst = Instance {
                inputs: vec![
                    x(&mut rng, &[4, 6]),
                    x(&mut rng, &[4, 6]),
                    Tensor::scalar(rng.random_range(-1.5..0.0)),
                ],
                data_inputs: 3,
            };
            check(
                |_, v| contrastive_loss(l2_normalize(v[0])?, l2_normalize(v[1])?, v[2].exp()),
                &inst,
                tol,
                inject,
            )?
        }
        "caption_loss" => {
            let vocab = 7;
            let targets: Vec<usize> = (0..10)
                .map(|i| {
                    if i % 4 == 3 {
                        IGNORED_TARGETS[i % 3]
                    } else {
                        rng.random_range(0..vocab)
                    }
                })
                .collect();
            let inst = Instance {
                inputs: vec![x(&mut rng, &[2, 5, vocab])],
                data_inputs: 1,
            };
            check(
                |_, v| Ok(caption_loss(v[0], &targets, &IGNORED_TARGETS)?.mean()),
                &inst,
                tol,
                inject,
            )?
        }
        _ => unreachable!("layer list and match arms agree"),
    };
    Ok(LayerCheck {
        layer: name,
        seed,
        report,
    })
}

/// Every layer kind at every seed.
pub fn run_suite(seeds: &[u64], tol: f64, inject: bool) -> Result<Vec<LayerCheck>> {
    let mut out = Vec::with_capacity(LAYERS.len() * seeds.len());
    for layer in LAYERS {
        for &seed in seeds {
            out.push(check_layer(layer, seed, tol, inject)?);
        }
    }
    Ok(out)
}
