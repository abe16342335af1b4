use super::tokenizer::{is_special, Tokenizer, BOS, CLS, EOS, IGNORED_TARGETS, PAD};
use crate::{Error, Result};

/// A caption laid out as `context_len + 1` ids:
/// `BOS, body.., EOS, PAD.., CLS, PAD`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    ids: Vec<usize>,
}

impl TokenLayout {
    /// Body tokens that fit: the layout always spends BOS, EOS, CLS and the
    /// final PAD.
    pub fn capacity(context_len: usize) -> usize {
        context_len.saturating_sub(3)
    }

    /// Lays out `body`, truncating it to [`capacity`](Self::capacity).
    pub fn new(body: &[usize], context_len: usize) -> Result<Self> {
        if body.is_empty() {
            return Err(Error::Data("caption is empty".into()));
        }
        if let Some(&bad) = body.iter().find(|&&t| is_special(t)) {
            return Err(Error::Data(format!("caption body contains reserved id {bad}")));
        }
        let cap = Self::capacity(context_len);
        if cap == 0 {
            return Err(Error::Data(format!(
                "context length {context_len} leaves no room"
            )));
        }
        let body = &body[..body.len().min(cap)];
        let mut ids = Vec::with_capacity(context_len + 1);
        ids.push(BOS);
        ids.extend_from_slice(body);
        ids.push(EOS);
        ids.resize(context_len - 1, PAD);
        ids.push(CLS);
        ids.push(PAD);
        Ok(Self { ids })
    }

    /// Validates an existing id sequence against the layout rules.
    pub fn from_ids(ids: Vec<usize>, context_len: usize) -> Result<Self> {
        check_layout(&ids, context_len)?;
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn context_len(&self) -> usize {
        self.ids.len() - 1
    }

    /// Decoder input: the first `context_len` ids.
    pub fn input(&self) -> &[usize] {
        &self.ids[..self.ids.len() - 1]
    }

    /// Next-token targets: ids shifted left by one.
    pub fn targets(&self) -> &[usize] {
        &self.ids[1..]
    }

    /// `true` where the target contributes to the captioning loss.
    pub fn loss_mask(&self) -> Vec<bool> {
        self.targets()
            .iter()
            .map(|t| !IGNORED_TARGETS.contains(t))
            .collect()
    }

    pub fn body(&self) -> &[usize] {
        let eos = self.ids.iter().position(|&t| t == EOS).unwrap_or(1);
        &self.ids[1..eos]
    }
}

/// Lays out the caption `text`; empty text (after trimming) is rejected.
pub fn encode_caption(text: &str, tokenizer: &dyn Tokenizer, context_len: usize) -> Result<TokenLayout> {
    let text = text.trim();
    if text.is_empty() {
        return Err(Error::Data("caption is empty".into()));
    }
    TokenLayout::new(&tokenizer.encode(text)?, context_len)
}

pub fn decode_caption(ids: &[usize], tokenizer: &dyn Tokenizer) -> String {
    let end = ids.iter().position(|&t| t == EOS).unwrap_or(ids.len());
    tokenizer.decode(&ids[..end])
}

/// Position-by-position check of the layout rules.
pub fn check_layout(ids: &[usize], context_len: usize) -> Result<()> {
    let fail = |msg: String| Err(Error::Data(format!("layout {ids:?}: {msg}")));
    if ids.len() != context_len + 1 {
        return fail(format!("length {} != {}", ids.len(), context_len + 1));
    }
    if ids[0] != BOS {
        return fail("first id is not BOS".into());
    }
    let Some(eos) = ids.iter().position(|&t| t == EOS) else {
        return fail("no EOS".into());
    };
    if eos < 2 {
        return fail("empty body".into());
    }
    if ids[1..eos].iter().any(|&t| is_special(t)) {
        return fail("special id inside the body".into());
    }
    let n = ids.len();
    if ids[n - 1] != PAD || ids[n - 2] != CLS {
        return fail("does not end with CLS, PAD".into());
    }
    if ids[eos + 1..n - 2].iter().any(|&t| t != PAD) {
        return fail("non-PAD between EOS and CLS".into());
    }
    Ok(())
}
