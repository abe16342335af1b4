use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const CLS: usize = 3;
/// Ids `0..RESERVED_TOKENS` are the special tokens above.
pub const RESERVED_TOKENS: usize = 4;
/// Targets excluded from the captioning loss. EOS is still predicted.
pub const IGNORED_TARGETS: [usize; 3] = [BOS, PAD, CLS];

pub fn is_special(id: usize) -> bool {
    id < RESERVED_TOKENS
}

/// Text to caption-body ids and back. Bodies never contain reserved ids.
pub trait Tokenizer: Send + Sync {
    fn encode(&self, text: &str) -> Result<Vec<usize>>;
    /// Inverse of `encode`; special ids are skipped.
    fn decode(&self, ids: &[usize]) -> String;
    fn vocab_size(&self) -> usize;
}

/// UTF-8 bytes shifted past the reserved block; vocabulary of 260.
#[derive(Clone, Copy, Debug, Default)]
pub struct ByteTokenizer;

impl Tokenizer for ByteTokenizer {
    fn encode(&self, text: &str) -> Result<Vec<usize>> {
        Ok(text.bytes().map(|b| b as usize + RESERVED_TOKENS).collect())
    }

    fn decode(&self, ids: &[usize]) -> String {
        let bytes: Vec<u8> = ids
            .iter()
            .filter(|&&i| (RESERVED_TOKENS..RESERVED_TOKENS + 256).contains(&i))
            .map(|&i| (i - RESERVED_TOKENS) as u8)
            .collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }

    fn vocab_size(&self) -> usize {
        256 + RESERVED_TOKENS
    }
}

/// Whitespace-separated words looked up in a vocabulary file (one token
/// per line, line number = id, lines 0-3 reserved for PAD, BOS, EOS, CLS).
/// Words missing from the vocabulary map to `<unk>` when the file has
/// one and are rejected otherwise.
#[derive(Clone, Debug)]
pub struct VocabTokenizer {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    unk: Option<usize>,
}

impl VocabTokenizer {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() <= RESERVED_TOKENS {
            return Err(Error::Data(format!(
                "vocabulary needs more than {RESERVED_TOKENS} entries, got {}",
                tokens.len()
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate().skip(RESERVED_TOKENS) {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!("vocabulary line {i} is not a single word")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        let unk = index.get("<unk>").copied();
        Ok(Self { tokens, index, unk })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }
}

impl Tokenizer for VocabTokenizer {
    fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| {
                self.index
                    .get(w)
                    .copied()
                    .or(self.unk)
                    .ok_or_else(|| Error::Data(format!("word {w:?} is not in the vocabulary")))
            })
            .collect()
    }

    fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| !is_special(i))
            .filter_map(|&i| self.tokens.get(i).map(String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn vocab_size(&self) -> usize {
        self.tokens.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_are_offset() {
        let t = ByteTokenizer;
        assert_eq!(t.encode("ab").unwrap(), vec![97 + 4, 98 + 4]);
        assert_eq!(t.vocab_size(), 260);
        let ids = t.encode("héllo wörld").unwrap();
        assert_eq!(t.decode(&ids), "héllo wörld");
        assert_eq!(t.decode(&[BOS, 101, EOS, PAD]), "a");
    }

    #[test]
    fn vocab_file_words() {
        let words = ["<pad>", "<s>", "</s>", "<cls>", "red", "circle", "on", "blue"];
        let t = VocabTokenizer::from_tokens(words.iter().map(|s| s.to_string()).collect()).unwrap();
        assert_eq!(t.encode("red circle on blue").unwrap(), vec![4, 5, 6, 7]);
        assert_eq!(t.decode(&[BOS, 4, 5, EOS]), "red circle");
        assert!(t.encode("green").is_err());
        assert_eq!(t.vocab_size(), 8);
    }

    #[test]
    fn duplicate_entries_are_rejected() {
        let words = ["a", "b", "c", "d", "x", "x"];
        assert!(VocabTokenizer::from_tokens(words.iter().map(|s| s.to_string()).collect()).is_err());
    }
}
