use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::image::{load_image, ImagePipelineConfig};
use super::layout::{encode_caption, TokenLayout};
use super::tokenizer::Tokenizer;
use crate::tensor::Tensor;
use crate::{par, Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    /// Relative to the manifest's directory.
    pub image: String,
    pub caption: String,
}

/// A JSON-lines manifest of `{"image": ..., "caption": ...}` records.
#[derive(Clone, Debug)]
pub struct ManifestDataset {
    pub path: PathBuf,
    pub root: PathBuf,
    pub split: String,
    pub records: Vec<ManifestRecord>,
}

impl ManifestDataset {
    /// Parses the manifest and checks that every image exists and every
    /// caption is non-empty. The split tag is the file stem.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(line)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
            if rec.caption.trim().is_empty() {
                return Err(Error::Data(format!(
                    "{}:{}: empty caption",
                    path.display(),
                    i + 1
                )));
            }
            let img = root.join(&rec.image);
            if !img.is_file() {
                return Err(Error::Data(format!(
                    "{}:{}: image {} not found",
                    path.display(),
                    i + 1,
                    img.display()
                )));
            }
            records.push(rec);
        }
        if records.is_empty() {
            return Err(Error::Data(format!("{} has no records", path.display())));
        }
        let split = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(Self {
            path: path.to_path_buf(),
            root,
            split,
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Decodes every image and lays out every caption. Records are
    /// processed in parallel; output order follows the manifest.
    pub fn load_samples(
        &self,
        tokenizer: &dyn Tokenizer,
        pipeline: &ImagePipelineConfig,
        context_len: usize,
    ) -> Result<Vec<Sample>> {
        par::map(&self.records, |rec| -> Result<Sample> {
            Ok(Sample {
                image: load_image(&self.root.join(&rec.image), pipeline)?,
                layout: encode_caption(&rec.caption, tokenizer, context_len)?,
            })
        })
        .into_iter()
        .collect()
    }
}

/// One preprocessed image-caption pair.
#[derive(Clone, Debug)]
pub struct Sample {
    /// `[3, size, size]`.
    pub image: Tensor,
    pub layout: TokenLayout,
}
