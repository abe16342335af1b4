use super::params::{Init, ParamBuilder, ParamId, Session};
use crate::tensor::Var;
use crate::Result;

/// Standard deviation of freshly drawn weight matrices.
pub const INIT_STD: f64 = 0.02;

/// `x · W + b` with `W: in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        pb.scope(name, |pb| Self {
            weight: pb.add("weight", vec![in_dim, out_dim], Init::Normal(INIT_STD)),
            bias: bias.then(|| pb.add("bias", vec![out_dim], Init::Const(0.0))),
            in_dim,
            out_dim,
        })
    }

    pub fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(&s.param(self.weight))?;
        match self.bias {
            Some(b) => y.add(&s.param(b)),
            None => Ok(y),
        }
    }
}
