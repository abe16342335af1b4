//! The run configuration file.

use std::fs;
use std::path::{Path, PathBuf};

use grrcoca::data::{
    synth_samples, ByteTokenizer, ImagePipelineConfig, ManifestDataset, Sample, Tokenizer, VocabTokenizer,
    IMAGENET_MEAN, IMAGENET_STD,
};
use grrcoca::model::ModelConfig;
use grrcoca::training::TrainConfig;
use grrcoca::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output: OutputConfig,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerKind {
    #[default]
    Byte,
    Vocab,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub tokenizer: TokenizerKind,
    pub vocab_file: Option<PathBuf>,
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    pub synth: Option<SynthConfig>,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            tokenizer: TokenizerKind::Byte,
            vocab_file: None,
            train_manifest: None,
            val_manifest: None,
            synth: None,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }
}

/// Synthetic shape-on-background data generated in memory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub train_samples: usize,
    pub val_samples: usize,
    pub train_seed: u64,
    pub val_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train_samples: 512,
            val_samples: 64,
            train_seed: 1,
            val_seed: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub run_dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            run_dir: PathBuf::from("runs/default"),
        }
    }
}

fn absolute(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    /// Parses a config file. Relative paths inside it are taken relative
    /// to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let base = fs::canonicalize(if base.as_os_str().is_empty() {
            Path::new(".")
        } else {
            &base
        })
        .map_err(|e| Error::io(&base, e))?;
        cfg.rebase(&base);
        Ok(cfg)
    }

    /// Makes every relative path absolute against `base`.
    pub fn rebase(&mut self, base: &Path) {
        let d = &mut self.data;
        for p in [&mut d.vocab_file, &mut d.train_manifest, &mut d.val_manifest]
            .into_iter()
            .flatten()
        {
            *p = absolute(base, p);
        }
        self.output.run_dir = absolute(base, &self.output.run_dir);
    }

    /// Fills derived values (the model's dropout rate) and checks every
    /// section, naming the first offending key.
    pub fn resolve(mut self) -> Result<Self> {
        self.train.validate()?;
        self.model.dropout = self.train.resolved_dropout();
        self.model.validate()?;
        self.check_data()?;
        let vocab = self.tokenizer()?.vocab_size();
        if self.model.vocab_size < vocab {
            return Err(Error::Config(format!(
                "model.vocab_size: {} is smaller than the tokenizer's {vocab} ids",
                self.model.vocab_size
            )));
        }
        Ok(self)
    }

    fn check_data(&self) -> Result<()> {
        let d = &self.data;
        let bad = |key: &str, why: &str| Err(Error::Config(format!("data.{key}: {why}")));
        match (&d.train_manifest, &d.val_manifest, &d.synth) {
            (Some(_), Some(_), None) | (None, None, Some(_)) => {}
            (_, _, Some(_)) => return bad("synth", "cannot be combined with manifests"),
            (None, _, None) => return bad("train_manifest", "required unless data.synth is set"),
            (Some(_), None, None) => return bad("val_manifest", "required unless data.synth is set"),
        }
        if let Some(s) = &d.synth {
            if s.train_samples < 2 || s.val_samples == 0 {
                return bad("synth", "needs at least 2 training and 1 validation samples");
            }
        }
        for (key, p) in [
            ("train_manifest", &d.train_manifest),
            ("val_manifest", &d.val_manifest),
        ] {
            if let Some(p) = p {
                if !p.is_file() {
                    return bad(key, &format!("{} does not exist", p.display()));
                }
            }
        }
        if d.tokenizer == TokenizerKind::Vocab && d.vocab_file.is_none() {
            return bad("vocab_file", "required by the vocab tokenizer");
        }
        self.pipeline().validate()
    }

    pub fn tokenizer(&self) -> Result<Box<dyn Tokenizer>> {
        Ok(match self.data.tokenizer {
            TokenizerKind::Byte => Box::new(ByteTokenizer),
            TokenizerKind::Vocab => {
                let path = self.data.vocab_file.as_ref().ok_or_else(|| {
                    Error::Config("data.vocab_file: required by the vocab tokenizer".into())
                })?;
                Box::new(VocabTokenizer::from_file(path)?)
            }
        })
    }

    pub fn pipeline(&self) -> ImagePipelineConfig {
        ImagePipelineConfig {
            size: self.model.image_size,
            mean: self.data.mean,
            std: self.data.std,
        }
    }

    /// Training and validation samples.
    pub fn load_splits(&self) -> Result<(Vec<Sample>, Vec<Sample>)> {
        let tok = self.tokenizer()?;
        let pipe = self.pipeline();
        let ctx = self.model.context_len;
        match (
            &self.data.synth,
            &self.data.train_manifest,
            &self.data.val_manifest,
        ) {
            (Some(s), _, _) => Ok((
                synth_samples(s.train_samples, s.train_seed, &pipe, tok.as_ref(), ctx)?,
                synth_samples(s.val_samples, s.val_seed, &pipe, tok.as_ref(), ctx)?,
            )),
            (None, Some(t), Some(v)) => Ok((
                ManifestDataset::load(t)?.load_samples(tok.as_ref(), &pipe, ctx)?,
                ManifestDataset::load(v)?.load_samples(tok.as_ref(), &pipe, ctx)?,
            )),
            _ => Err(Error::Config("data: no training data configured".into())),
        }
    }

    /// The validation split alone.
    pub fn load_val(&self) -> Result<Vec<Sample>> {
        let tok = self.tokenizer()?;
        let pipe = self.pipeline();
        match (&self.data.synth, &self.data.val_manifest) {
            (Some(s), _) => synth_samples(
                s.val_samples,
                s.val_seed,
                &pipe,
                tok.as_ref(),
                self.model.context_len,
            ),
            (None, Some(v)) => {
                ManifestDataset::load(v)?.load_samples(tok.as_ref(), &pipe, self.model.context_len)
            }
            _ => Err(Error::Config("data: no validation data configured".into())),
        }
    }
}
