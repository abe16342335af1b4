//! Contrastive and captioning objectives, perplexity and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::tensor::{Tensor, Var};
use crate::{Error, Result};

/// Rows of contrastive latents must have unit norm to within this.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Symmetric contrastive loss over `N` paired, unit-norm latents
/// `image: [N, d]` and `text: [N, d]`, with similarities divided by the
/// scalar `temperature`:
///
/// `-(1/N) [Σ_i log softmax_j(x_i·y_j/σ)_i + Σ_i log softmax_j(y_i·x_j/σ)_i]`
pub fn contrastive_loss<'t>(image: Var<'t>, text: Var<'t>, temperature: Var<'t>) -> Result<Var<'t>> {
    let (xs, ys) = (image.shape(), text.shape());
    if xs.len() != 2 || xs != ys {
        return Err(Error::shape("contrastive_loss", &xs, &ys));
    }
    if xs[0] == 0 {
        return Err(Error::invalid("contrastive_loss", "empty batch"));
    }
    check_unit_rows("image latents", &image.value())?;
    check_unit_rows("text latents", &text.value())?;
    let sim = image.matmul(&text.transpose()?)?;
    contrastive_from_similarity(sim, temperature)
}

/// The contrastive loss given the `[N, N]` similarity matrix directly.
pub fn contrastive_from_similarity<'t>(sim: Var<'t>, temperature: Var<'t>) -> Result<Var<'t>> {
    let shape = sim.shape();
    if shape.len() != 2 || shape[0] != shape[1] || shape[0] == 0 {
        return Err(Error::invalid(
            "contrastive_loss",
            format!("similarity must be square and non-empty, got {shape:?}"),
        ));
    }
    let t = temperature.value();
    if t.numel() != 1 || !(t.data()[0] > 0.0) {
        return Err(Error::invalid(
            "contrastive_loss",
            format!("temperature must be a positive scalar, got {:?}", t.data()),
        ));
    }
    let n = shape[0];
    let logits = sim.div(&temperature)?;
    let diag: Vec<usize> = (0..n).collect();
    let i2t = logits.log_softmax()?.pick_last(&diag)?.sum();
    let t2i = logits.transpose()?.log_softmax()?.pick_last(&diag)?.sum();
    Ok(i2t.add(&t2i)?.scale(-1.0 / n as f64))
}

fn check_unit_rows(what: &str, t: &Tensor) -> Result<()> {
    if !t.is_finite() {
        return Err(Error::NonFinite(what.to_string()));
    }
    let d = t.shape()[t.rank() - 1];
    for (i, row) in t.data().chunks(d).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::invalid(
                "contrastive_loss",
                format!("{what} row {i} has norm {norm}, expected 1"),
            ));
        }
    }
    Ok(())
}

/// Summed token cross-entropy together with the number of positions that
/// contributed to it.
#[derive(Clone, Copy, Debug)]
pub struct CaptionLoss<'t> {
    pub sum: Var<'t>,
    pub valid_tokens: usize,
}

impl<'t> CaptionLoss<'t> {
    pub fn mean(&self) -> Var<'t> {
        self.sum.scale(1.0 / self.valid_tokens as f64)
    }
}

/// Cross-entropy of `logits: [..., vocab]` against one target id per row,
/// summed over rows whose target is not in `ignore`.
pub fn caption_loss<'t>(logits: Var<'t>, targets: &[usize], ignore: &[usize]) -> Result<CaptionLoss<'t>> {
    let shape = logits.shape();
    let vocab = *shape.last().unwrap_or(&0);
    let rows = shape.iter().product::<usize>() / vocab.max(1);
    if targets.len() != rows {
        return Err(Error::invalid(
            "caption_loss",
            format!("{} targets for logits {shape:?}", targets.len()),
        ));
    }
    let keep: Vec<bool> = targets.iter().map(|t| !ignore.contains(t)).collect();
    let valid_tokens = keep.iter().filter(|&&k| k).count();
    if valid_tokens == 0 {
        return Err(Error::invalid(
            "caption_loss",
            "no target outside the ignored set",
        ));
    }
    // Ignored rows pick index 0 and are then masked out, so their logits
    // receive exactly zero gradient.
    let picks: Vec<usize> = targets
        .iter()
        .zip(&keep)
        .map(|(&t, &k)| if k { t } else { 0 })
        .collect();
    let mask = Tensor::from_fn(vec![rows], |i| if keep[i] { 1.0 } else { 0.0 });
    let logp = logits.reshape(&[rows, vocab])?.log_softmax()?.pick_last(&picks)?;
    let tape = logits.tape();
    let sum = logp.mul(&tape.constant(mask))?.sum().neg();
    Ok(CaptionLoss { sum, valid_tokens })
}

/// `exp(summed_loss / valid_tokens)`.
pub fn perplexity(summed_loss: f64, valid_tokens: usize) -> Result<f64> {
    if valid_tokens == 0 {
        return Err(Error::invalid("perplexity", "zero valid tokens"));
    }
    Ok((summed_loss / valid_tokens as f64).exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub contrastive: f64,
    pub caption: f64,
}

impl LossWeights {
    pub const PRETRAIN: LossWeights = LossWeights {
        contrastive: 2.0,
        caption: 1.0,
    };
    pub const FINETUNE: LossWeights = LossWeights {
        contrastive: 1.0,
        caption: 2.0,
    };

    pub fn new(contrastive: f64, caption: f64) -> Result<Self> {
        let w = Self { contrastive, caption };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.contrastive) || !ok(self.caption) {
            return Err(Error::Config(format!(
                "loss weights must be finite and nonnegative, got {self:?}"
            )));
        }
        if self.contrastive == 0.0 && self.caption == 0.0 {
            return Err(Error::Config("loss weights are both zero".into()));
        }
        Ok(())
    }

    /// `λ_con·L_con + λ_cap·L_cap` on plain numbers.
    pub fn combine(&self, contrastive: f64, caption_mean: f64) -> f64 {
        self.contrastive * contrastive + self.caption * caption_mean
    }
}

/// `λ_con·L_con + λ_cap·L_cap_mean`.
pub fn coca_loss<'t>(contrastive: Var<'t>, caption_mean: Var<'t>, w: LossWeights) -> Result<Var<'t>> {
    contrastive
        .scale(w.contrastive)
        .add(&caption_mean.scale(w.caption))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::l2_normalize;
    use crate::tensor::{grad_check, Tape};
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let mut t = Tensor::randn(vec![n, d], 1.0, rng);
        for row in t.data_mut().chunks_mut(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= norm);
        }
        t
    }

    fn contrastive_value(x: &Tensor, y: &Tensor, sigma: f64) -> f64 {
        let tape = Tape::new();
        let loss = contrastive_loss(
            tape.constant(x.clone()),
            tape.constant(y.clone()),
            tape.constant(Tensor::scalar(sigma)),
        )
        .unwrap();
        loss.value().item().unwrap()
    }

    #[test]
    fn single_pair_is_zero() {
        let x = Tensor::new(vec![1, 2], vec![0.6, 0.8]).unwrap();
        let y = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        assert_eq!(contrastive_value(&x, &y, 0.07), 0.0);
    }

    #[test]
    fn basis_pairs_match_hand_softmax() {
        let e = Tensor::eye(2);
        // Each row: -log(e / (e + 1)) = ln(1 + e^-1); two rows, two
        // directions, divided by N = 2.
        let expect = 2.0 * (1.0 + (-1.0f64).exp()).ln();
        let got = contrastive_value(&e, &e, 1.0);
        assert!((got - expect).abs() < 1e-12);
        assert!((got - 0.6265234).abs() < 1e-7);
    }

    #[test]
    fn joint_permutation_leaves_loss_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = unit_rows(6, 5, &mut rng);
        let y = unit_rows(6, 5, &mut rng);
        let base = contrastive_value(&x, &y, 0.3);
        let mut order: Vec<usize> = (0..6).collect();
        order.shuffle(&mut rng);
        let permute = |t: &Tensor| {
            let d: Vec<f64> = order
                .iter()
                .flat_map(|&i| t.data()[i * 5..(i + 1) * 5].to_vec())
                .collect();
            Tensor::new(vec![6, 5], d).unwrap()
        };
        let shuffled = contrastive_value(&permute(&x), &permute(&y), 0.3);
        assert!((base - shuffled).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_latents() {
        let tape = Tape::new();
        let s = tape.constant(Tensor::scalar(1.0));
        let x = tape.constant(Tensor::full(vec![2, 2], 1.0));
        assert!(contrastive_loss(x, x, s).is_err());
        let nan = tape.constant(Tensor::full(vec![1, 1], f64::NAN));
        assert!(matches!(contrastive_loss(nan, nan, s), Err(Error::NonFinite(_))));
    }

    #[test]
    fn pushing_negatives_apart_lowers_loss() {
        let mut last = f64::INFINITY;
        for step in 0..=10 {
            let off = -(step as f64) / 10.0;
            let sim = Tensor::from_fn(vec![3, 3], |i| if i % 4 == 0 { 1.0 } else { off });
            let tape = Tape::new();
            let loss = contrastive_from_similarity(tape.constant(sim), tape.constant(Tensor::scalar(0.5)))
                .unwrap()
                .value()
                .item()
                .unwrap();
            assert!(loss < last);
            last = loss;
        }
    }

    #[test]
    fn contrastive_gradients() {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = vec![
                Tensor::randn(vec![3, 4], 1.0, &mut rng),
                Tensor::randn(vec![3, 4], 1.0, &mut rng),
                Tensor::scalar(0.4),
            ];
            let r = grad_check(
                |_, v| contrastive_loss(l2_normalize(v[0])?, l2_normalize(v[1])?, v[2]),
                &inputs,
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(r.passed, "{r:?}");
        }
    }

    const PAD: usize = 0;
    const BOS: usize = 1;
    const CLS: usize = 3;

    #[test]
    fn confident_logits_give_near_zero_loss() {
        let targets = [4, 2, 7, PAD];
        let logits = Tensor::from_fn(
            vec![1, 4, 10],
            |i| {
                if targets[i / 10] == i % 10 {
                    30.0
                } else {
                    0.0
                }
            },
        );
        let tape = Tape::new();
        let l = caption_loss(tape.constant(logits), &targets, &[BOS, PAD, CLS]).unwrap();
        assert_eq!(l.valid_tokens, 3);
        assert!(l.sum.value().item().unwrap() < 1e-9);
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(vec![1, 5, 10]));
        let targets = [5, 6, PAD, 2, CLS];
        let l = caption_loss(logits, &targets, &[BOS, PAD, CLS]).unwrap();
        let sum = l.sum.value().item().unwrap();
        assert_eq!(l.valid_tokens, 3);
        assert!((sum - 3.0 * 10f64.ln()).abs() < 1e-12);
        assert!((sum - 6.9077553).abs() < 1e-7);
        assert!((perplexity(sum, 3).unwrap() - 10.0).abs() < 1e-12);
        assert!((l.mean().value().item().unwrap() - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn all_ignored_is_an_error() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(vec![2, 4]));
        assert!(caption_loss(logits, &[PAD, PAD], &[BOS, PAD, CLS]).is_err());
        assert!(perplexity(1.0, 0).is_err());
        assert_eq!(perplexity(0.0, 4).unwrap(), 1.0);
    }

    #[test]
    fn ignored_rows_get_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tape = Tape::new();
        let logits = tape.leaf(Tensor::randn(vec![4, 6], 2.0, &mut rng));
        let targets = [BOS, 4, CLS, 5];
        let l = caption_loss(logits, &targets, &[BOS, PAD, CLS]).unwrap();
        tape.backward(l.sum).unwrap();
        let g = logits.grad().unwrap();
        for row in [0, 2] {
            assert!(g.data()[row * 6..(row + 1) * 6].iter().all(|&v| v == 0.0));
        }
        assert!(g.data()[6..12].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn caption_gradients() {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logits = Tensor::randn(vec![2, 3, 5], 1.0, &mut rng);
            let targets = [4, 2, PAD, CLS, 1 + 3, 2];
            let r = grad_check(
                |_, v| Ok(caption_loss(v[0], &targets, &[BOS, PAD, CLS])?.mean()),
                &[logits],
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn weighted_sum() {
        let w = LossWeights::PRETRAIN;
        let v = w.combine(0.3610, 12.9976f64.ln());
        assert!((v - 3.2864).abs() < 0.002, "{v}");
        let v = LossWeights::FINETUNE.combine(1.2971, 5.4669f64.ln());
        assert!((v - 4.6955).abs() < 0.002, "{v}");
        let tape = Tape::new();
        let con = tape.constant(Tensor::scalar(0.7));
        let cap = tape.constant(Tensor::scalar(1.9));
        let only_cap = coca_loss(con, cap, LossWeights::new(0.0, 3.0).unwrap()).unwrap();
        assert!((only_cap.value().item().unwrap() - 5.7).abs() < 1e-12);
        assert!(LossWeights::new(0.0, 0.0).is_err());
        assert!(LossWeights::new(-1.0, 1.0).is_err());
    }
}
