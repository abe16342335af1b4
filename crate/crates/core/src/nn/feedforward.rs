use serde::{Deserialize, Serialize};

use super::linear::Linear;
use super::params::{ParamBuilder, Session};
use crate::tensor::Var;
use crate::{Error, Result};

/// Hidden width of a GEGLU feedforward: `floor(scaler · d_model)`.
pub fn geglu_hidden(d_model: usize, scaler: f64) -> usize {
    // The small offset keeps products such as 2.7 × 10 from flooring to 26.
    (scaler * d_model as f64 + 1e-9).floor() as usize
}

/// Hidden width of a plain feedforward: `floor(scaler · d_model)`.
pub fn plain_hidden(d_model: usize, scaler: f64) -> usize {
    geglu_hidden(d_model, scaler)
}

/// GELU-gated linear unit:
/// `(gelu(x·W + Wb) ⊙ (x·V + Vb)) · O + Ob`, dropout after the gate.
#[derive(Clone, Debug)]
pub struct Geglu {
    pub w: Linear,
    pub v: Linear,
    pub o: Linear,
    pub dropout: f64,
}

impl Geglu {
    pub fn new(pb: &mut ParamBuilder, d_model: usize, d_hidden: usize, dropout: f64) -> Self {
        Self {
            w: Linear::new(pb, "w", d_model, d_hidden, true),
            v: Linear::new(pb, "v", d_model, d_hidden, true),
            o: Linear::new(pb, "o", d_hidden, d_model, true),
            dropout,
        }
    }

    /// Assembles a unit from existing projections, checking that the gate
    /// and value paths agree.
    pub fn from_parts(w: Linear, v: Linear, o: Linear, dropout: f64) -> Result<Self> {
        if w.in_dim != v.in_dim || w.out_dim != v.out_dim {
            return Err(Error::shape(
                "geglu",
                &[w.in_dim, w.out_dim],
                &[v.in_dim, v.out_dim],
            ));
        }
        if o.in_dim != w.out_dim || o.out_dim != w.in_dim {
            return Err(Error::shape(
                "geglu",
                &[w.in_dim, w.out_dim],
                &[o.in_dim, o.out_dim],
            ));
        }
        Ok(Self { w, v, o, dropout })
    }

    pub fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let gate = self.w.forward(s, x)?.gelu();
        let value = self.v.forward(s, x)?;
        let h = s.dropout(gate.mul(&value)?, self.dropout)?;
        self.o.forward(s, h)
    }

    pub fn num_params(d_model: usize, d_hidden: usize) -> usize {
        3 * d_model * d_hidden + 2 * d_hidden + d_model
    }
}

/// Two-layer perceptron with GELU at the hidden layer.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc_in: Linear,
    pub fc_out: Linear,
    pub dropout: f64,
}

impl FeedForward {
    pub fn new(pb: &mut ParamBuilder, d_model: usize, d_hidden: usize, dropout: f64) -> Self {
        Self {
            fc_in: Linear::new(pb, "fc_in", d_model, d_hidden, true),
            fc_out: Linear::new(pb, "fc_out", d_hidden, d_model, true),
            dropout,
        }
    }

    pub fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = s.dropout(self.fc_in.forward(s, x)?.gelu(), self.dropout)?;
        self.fc_out.forward(s, h)
    }

    pub fn num_params(d_model: usize, d_hidden: usize) -> usize {
        2 * d_model * d_hidden + d_hidden + d_model
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MlpKind {
    Geglu,
    Plain,
}

#[derive(Clone, Debug)]
pub enum Mlp {
    Geglu(Geglu),
    Plain(FeedForward),
}

impl Mlp {
    pub fn new(pb: &mut ParamBuilder, kind: MlpKind, d_model: usize, d_hidden: usize, dropout: f64) -> Self {
        match kind {
            MlpKind::Geglu => Mlp::Geglu(Geglu::new(pb, d_model, d_hidden, dropout)),
            MlpKind::Plain => Mlp::Plain(FeedForward::new(pb, d_model, d_hidden, dropout)),
        }
    }

    pub fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Result<Var<'t>> {
        match self {
            Mlp::Geglu(g) => g.forward(s, x),
            Mlp::Plain(f) => f.forward(s, x),
        }
    }
}
