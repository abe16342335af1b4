use serde::{Deserialize, Serialize};

use super::params::{Init, ParamBuilder, ParamId, Session};
use crate::tensor::Var;
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    /// `x / sqrt(mean(x²) + ε) ⊙ g`
    Rms,
    /// `(x − mean) / sqrt(var + ε) ⊙ g + β`
    Layer,
}

impl NormKind {
    pub fn default_eps(self) -> f64 {
        match self {
            NormKind::Rms => 1e-6,
            NormKind::Layer => 1e-5,
        }
    }
}

/// Normalization over the trailing (feature) axis.
#[derive(Clone, Debug)]
pub struct Norm {
    pub kind: NormKind,
    pub gain: ParamId,
    pub bias: Option<ParamId>,
    pub eps: f64,
}

impl Norm {
    pub fn new(pb: &mut ParamBuilder, name: &str, kind: NormKind, dim: usize, eps: f64) -> Self {
        pb.scope(name, |pb| Self {
            kind,
            gain: pb.add("gain", vec![dim], Init::Const(1.0)),
            bias: (kind == NormKind::Layer).then(|| pb.add("beta", vec![dim], Init::Const(0.0))),
            eps,
        })
    }

    pub fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let axis = x.shape().len() - 1;
        let out = match self.kind {
            NormKind::Rms => {
                let ms = x.mul(&x)?.mean_axis(axis)?;
                x.mul(&ms.add_scalar(self.eps).powf(-0.5))?
            }
            NormKind::Layer => {
                let centered = x.sub(&x.mean_axis(axis)?)?;
                let var = centered.mul(&centered)?.mean_axis(axis)?;
                centered.mul(&var.add_scalar(self.eps).powf(-0.5))?
            }
        };
        let out = out.mul(&s.param(self.gain))?;
        match self.bias {
            Some(b) => out.add(&s.param(b)),
            None => Ok(out),
        }
    }
}

/// Scales each row along the last axis to unit Euclidean norm.
pub fn l2_normalize<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let axis = x.shape().len() - 1;
    let sq = x.mul(&x)?.sum_axis(axis)?;
    x.mul(&sq.powf(-0.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamSet;
    use crate::tensor::{Tape, Tensor};

    fn apply(kind: NormKind, x: Tensor, gain: f64) -> Tensor {
        apply_eps(kind, x, gain, 0.0)
    }

    fn apply_eps(kind: NormKind, x: Tensor, gain: f64, eps: f64) -> Tensor {
        let dim = *x.shape().last().unwrap();
        let mut pb = ParamBuilder::new();
        let norm = Norm::new(&mut pb, "n", kind, dim, eps);
        let mut params = ParamSet::init(&pb.finish(), 0);
        params.set(norm.gain, Tensor::full(vec![dim], gain));
        let tape = Tape::new();
        let s = Session::new(&tape, &params);
        let out = norm.forward(&s, tape.constant(x)).unwrap().value();
        (*out).clone()
    }

    #[test]
    fn rms_of_constant_row_is_ones() {
        let y = apply(NormKind::Rms, Tensor::full(vec![1, 5], 2.5), 1.0);
        assert!(y.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn rms_hand_example() {
        let y = apply(NormKind::Rms, Tensor::new(vec![1, 2], vec![3., 4.]).unwrap(), 1.0);
        // rms = sqrt((9 + 16) / 2) = sqrt(12.5)
        let rms = 12.5f64.sqrt();
        assert!((y.data()[0] - 3.0 / rms).abs() < 1e-12);
        assert!((y.data()[1] - 4.0 / rms).abs() < 1e-12);
        assert!((y.data()[0] - 0.8485281).abs() < 1e-7);
        assert!((y.data()[1] - 1.1313708).abs() < 1e-7);
    }

    #[test]
    fn zero_gain_zeroes_output() {
        let y = apply(
            NormKind::Rms,
            Tensor::from_fn(vec![2, 3], |i| i as f64 + 1.0),
            0.0,
        );
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layernorm_examples() {
        // Zero variance needs a positive epsilon.
        let y = apply_eps(NormKind::Layer, Tensor::full(vec![1, 4], 7.0), 1.0, 1e-5);
        assert!(y.data().iter().all(|&v| v == 0.0));
        let y = apply(
            NormKind::Layer,
            Tensor::new(vec![1, 2], vec![1., 3.]).unwrap(),
            1.0,
        );
        assert_eq!(y.data(), &[-1.0, 1.0]);
    }
}
