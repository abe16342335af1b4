//! Procedural image-caption pairs: one colored shape on a colored
//! background, captioned `"<color> <shape> on <background>"`.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image::{preprocess, ImagePipelineConfig, RgbPlanes};
use super::layout::encode_caption;
use super::manifest::{ManifestDataset, ManifestRecord, Sample};
use super::tokenizer::Tokenizer;
use crate::{par, Error, Result};

pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "cross"];
pub const COLORS: [(&str, [u8; 3]); 6] = [
    ("red", [220, 40, 40]),
    ("green", [40, 180, 60]),
    ("blue", [40, 70, 220]),
    ("yellow", [235, 215, 40]),
    ("white", [245, 245, 245]),
    ("black", [15, 15, 15]),
];

/// Everything that determines one drawn image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthItem {
    pub shape: usize,
    pub color: usize,
    pub background: usize,
    /// Center and radius as fractions of the image side.
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

impl SynthItem {
    pub fn caption(&self) -> String {
        format!(
            "{} {} on {}",
            COLORS[self.color].0, SHAPES[self.shape], COLORS[self.background].0
        )
    }

    pub fn render(&self, size: usize) -> image::RgbImage {
        let s = size as f64;
        let (cx, cy, r) = (self.cx * s, self.cy * s, self.radius * s);
        let fg = COLORS[self.color].1;
        let bg = COLORS[self.background].1;
        image::RgbImage::from_fn(size as u32, size as u32, |x, y| {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let inside = match self.shape {
                0 => dx * dx + dy * dy <= r * r,
                1 => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
                2 => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
                _ => {
                    let bar = r / 3.0;
                    (dx.abs() <= bar && dy.abs() <= r) || (dy.abs() <= bar && dx.abs() <= r)
                }
            };
            image::Rgb(if inside { fg } else { bg })
        })
    }
}

/// Draws `n` items; the (shape, color, background) triple is uniform over
/// all combinations with distinct colors.
pub fn synth_items(n: usize, seed: u64) -> Vec<SynthItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nc = COLORS.len();
    let combos = SHAPES.len() * nc * (nc - 1);
    (0..n)
        .map(|_| {
            let k = rng.random_range(0..combos);
            let shape = k / (nc * (nc - 1));
            let color = (k / (nc - 1)) % nc;
            let mut background = k % (nc - 1);
            if background >= color {
                background += 1;
            }
            SynthItem {
                shape,
                color,
                background,
                cx: 0.5 + rng.random_range(-0.1..0.1),
                cy: 0.5 + rng.random_range(-0.1..0.1),
                radius: rng.random_range(0.25..0.4),
            }
        })
        .collect()
}

/// The samples `write_synth_dataset` followed by `load_samples` would
/// produce, without touching the filesystem.
pub fn synth_samples(
    n: usize,
    seed: u64,
    pipeline: &ImagePipelineConfig,
    tokenizer: &dyn Tokenizer,
    context_len: usize,
) -> Result<Vec<Sample>> {
    pipeline.validate()?;
    par::map(&synth_items(n, seed), |item| -> Result<Sample> {
        let planes = RgbPlanes::from_rgb8(&item.render(pipeline.size));
        Ok(Sample {
            image: preprocess(&planes, pipeline),
            layout: encode_caption(&item.caption(), tokenizer, context_len)?,
        })
    })
    .into_iter()
    .collect()
}

/// Writes `<dir>/<split>.jsonl` and `<dir>/images/<split>_NNNNN.png`.
/// The same `(n, seed, size)` always produces byte-identical files.
pub fn write_synth_dataset(
    dir: &Path,
    split: &str,
    n: usize,
    seed: u64,
    size: usize,
) -> Result<ManifestDataset> {
    if n == 0 || size == 0 {
        return Err(Error::Data("synthetic dataset needs n > 0 and size > 0".into()));
    }
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut manifest = String::new();
    for (i, item) in synth_items(n, seed).iter().enumerate() {
        let rel = format!("images/{split}_{i:05}.png");
        let path = dir.join(&rel);
        item.render(size)
            .save_with_format(&path, image::ImageFormat::Png)
            .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))?;
        let rec = ManifestRecord {
            image: rel,
            caption: item.caption(),
        };
        manifest.push_str(&serde_json::to_string(&rec)?);
        manifest.push('\n');
    }
    let path = dir.join(format!("{split}.jsonl"));
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(manifest.as_bytes())
        .map_err(|e| Error::io(&path, e))?;
    drop(f);
    ManifestDataset::load(&path)
}
