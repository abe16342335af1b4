use serde::{Deserialize, Serialize};

use crate::nn::ParamSet;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.001,
        }
    }
}

/// AdamW moments and step count.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamSet, config: AdamWConfig) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape().to_vec()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    /// `p ← p − lr·(m̂ / (√v̂ + ε) + wd·p)` with bias-corrected moments.
    /// Non-finite gradients reject the step before anything changes.
    /// Updated parameters are rounded to `f32` so they stay exactly
    /// representable in checkpoints.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::invalid(
                "adamw",
                format!("{} gradients for {} parameters", grads.len(), params.len()),
            ));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != self.m[i].shape() {
                return Err(Error::shape("adamw", self.m[i].shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of {}",
                    params.iter().nth(i).map(|p| p.name.as_str()).unwrap_or("?")
                )));
            }
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.tensor_mut(i);
            for (((pj, mj), vj), &gj) in p.data_mut().iter_mut().zip(m).zip(v).zip(g.data()) {
                *mj = beta1 * *mj + (1.0 - beta1) * gj;
                *vj = beta2 * *vj + (1.0 - beta2) * gj * gj;
                let mhat = *mj / bc1;
                let vhat = *vj / bc2;
                *pj -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * *pj);
            }
            p.round_to_f32();
        }
        Ok(())
    }
}

/// Global ℓ2 norm over all gradients.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt()
}

/// Rescales all gradients by `max_norm / norm` when the global norm
/// exceeds `max_norm`. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Init, ParamBuilder};

    fn scalar_params(v: f64) -> ParamSet {
        let mut pb = ParamBuilder::new();
        pb.add("p", vec![1], Init::Const(v));
        ParamSet::init(&pb.finish(), 0)
    }

    fn no_decay() -> AdamWConfig {
        AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = scalar_params(0.75);
        let mut opt = OptimizerState::new(&p, no_decay());
        opt.step(&mut p, &[Tensor::zeros(vec![1])], 0.1).unwrap();
        assert_eq!(p.tensors()[0].data(), &[0.75]);
    }

    #[test]
    fn first_step_hand_value() {
        let mut p = scalar_params(1.0);
        let mut opt = OptimizerState::new(&p, no_decay());
        opt.step(&mut p, &[Tensor::ones(vec![1])], 0.1).unwrap();
        // m̂ = v̂ = 1, so the step is lr · 1 / (1 + ε).
        let expect = (1.0 - 0.1 / (1.0 + 1e-8)) as f32 as f64;
        assert_eq!(p.tensors()[0].data()[0], expect);
        assert!((expect - 0.9).abs() < 1e-7);
    }

    #[test]
    fn pure_decay() {
        let mut p = scalar_params(2.0);
        let mut opt = OptimizerState::new(&p, AdamWConfig::default());
        opt.step(&mut p, &[Tensor::zeros(vec![1])], 0.5).unwrap();
        let expect = (2.0 * (1.0 - 0.5 * 0.001)) as f32 as f64;
        assert_eq!(p.tensors()[0].data()[0], expect);
    }

    #[test]
    fn non_finite_gradient_is_rejected_untouched() {
        let mut p = scalar_params(1.0);
        let mut opt = OptimizerState::new(&p, no_decay());
        let err = opt.step(&mut p, &[Tensor::full(vec![1], f64::NAN)], 0.1);
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!(opt.step, 0);
        assert_eq!(p.tensors()[0].data(), &[1.0]);
    }

    #[test]
    fn clipping() {
        let mut small = vec![Tensor::new(vec![2], vec![0.3, 0.4]).unwrap()];
        clip_gradients(&mut small, 1.0);
        assert_eq!(small[0].data(), &[0.3, 0.4]);
        let mut big = vec![Tensor::new(vec![2], vec![3.0, 4.0]).unwrap()];
        assert_eq!(clip_gradients(&mut big, 1.0), 5.0);
        assert!((big[0].data()[0] - 0.6).abs() < 1e-15);
        assert!((big[0].data()[1] - 0.8).abs() < 1e-15);
    }
}
