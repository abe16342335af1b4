use super::linear::{Linear, INIT_STD};
use super::params::{Init, ParamBuilder, ParamId, Session};
use crate::tensor::Var;
use crate::{Error, Result};

/// Lookup table `[vocab, d_model]`.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub d_model: usize,
}

impl Embedding {
    pub fn new(pb: &mut ParamBuilder, name: &str, vocab: usize, d_model: usize) -> Self {
        Self {
            table: pb.add(name, vec![vocab, d_model], Init::Normal(INIT_STD)),
            vocab,
            d_model,
        }
    }

    /// `ids` laid out as `batch` rows of equal length -> `[batch, len, d_model]`.
    pub fn forward<'t>(&self, s: &Session<'t>, ids: &[usize], batch: usize) -> Result<Var<'t>> {
        if batch == 0 || !ids.len().is_multiple_of(batch) {
            return Err(Error::invalid(
                "embedding",
                format!("{} ids do not split into {batch} rows", ids.len()),
            ));
        }
        let rows = s.param(self.table).gather_rows(ids)?;
        rows.reshape(&[batch, ids.len() / batch, self.d_model])
    }
}

/// Patchify then project: `[batch, C, H, W] -> [batch, patches, d_model]`.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub channels: usize,
    pub patch: usize,
}

impl PatchEmbed {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize, patch: usize, d_model: usize) -> Self {
        Self {
            proj: Linear::new(pb, name, channels * patch * patch, d_model, true),
            channels,
            patch,
        }
    }

    pub fn forward<'t>(&self, s: &Session<'t>, images: Var<'t>) -> Result<Var<'t>> {
        let shape = images.shape();
        if shape.len() < 3 || shape[shape.len() - 3] != self.channels {
            return Err(Error::invalid(
                "patch_embed",
                format!("expected [.., {}, H, W], got {shape:?}", self.channels),
            ));
        }
        self.proj.forward(s, images.patches(self.patch)?)
    }
}
