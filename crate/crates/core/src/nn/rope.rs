use crate::tensor::Var;
use crate::{Error, Result};

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

/// Rotary position embedding for one head width.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RopeConfig {
    head_dim: usize,
    base: f64,
}

impl RopeConfig {
    pub fn new(head_dim: usize, base: f64) -> Result<Self> {
        if head_dim == 0 || !head_dim.is_multiple_of(2) {
            return Err(Error::invalid(
                "rope",
                format!("head dim must be even and positive, got {head_dim}"),
            ));
        }
        if !(base > 0.0 && base.is_finite()) {
            return Err(Error::invalid(
                "rope",
                format!("base must be positive, got {base}"),
            ));
        }
        Ok(Self { head_dim, base })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    /// `θ_i = base^(−2i / head_dim)` for each rotated pair.
    pub fn frequencies(&self) -> Vec<f64> {
        (0..self.head_dim / 2)
            .map(|i| self.base.powf(-2.0 * i as f64 / self.head_dim as f64))
            .collect()
    }

    /// Rotates `x: [..., seq, heads, head_dim]`, slot `s` at `positions[s]`.
    pub fn apply<'t>(&self, x: Var<'t>, positions: &[usize]) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.last() != Some(&self.head_dim) {
            return Err(Error::invalid(
                "rope",
                format!("head dim {} does not match input {shape:?}", self.head_dim),
            ));
        }
        x.rope(positions, self.base)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rotate(cfg: &RopeConfig, v: &Tensor, pos: usize) -> Tensor {
        let tape = Tape::new();
        let d = v.numel();
        let x = tape.constant(v.clone().reshape(vec![1, 1, d]).unwrap());
        let out = cfg.apply(x, &[pos]).unwrap().value();
        (*out).clone().reshape(vec![d]).unwrap()
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn odd_head_dim_is_rejected() {
        assert!(RopeConfig::new(7, 10_000.0).is_err());
        assert!(RopeConfig::new(0, 10_000.0).is_err());
    }

    #[test]
    fn position_zero_is_identity() {
        let cfg = RopeConfig::new(8, DEFAULT_ROPE_BASE).unwrap();
        let v = Tensor::from_fn(vec![8], |i| i as f64 - 3.5);
        assert_eq!(rotate(&cfg, &v, 0), v);
    }

    #[test]
    fn two_dim_rotation_oracle() {
        // head_dim 2 has a single frequency, base^0 = 1.
        let cfg = RopeConfig::new(2, DEFAULT_ROPE_BASE).unwrap();
        assert_eq!(cfg.frequencies(), vec![1.0]);
        let e1 = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        let d = dot(&rotate(&cfg, &e1, 3), &rotate(&cfg, &e1, 1));
        assert!((d - 2f64.cos()).abs() < 1e-12);
        assert!((d - -0.4161468).abs() < 1e-7);
    }

    #[test]
    fn logits_depend_on_offset_only() {
        let cfg = RopeConfig::new(16, DEFAULT_ROPE_BASE).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let q = Tensor::randn(vec![16], 1.0, &mut rng);
            let k = Tensor::randn(vec![16], 1.0, &mut rng);
            let (m, n, shift) = (5, 2, 37);
            let a = dot(&rotate(&cfg, &q, m), &rotate(&cfg, &k, n));
            let b = dot(&rotate(&cfg, &q, m + shift), &rotate(&cfg, &k, n + shift));
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }
}
