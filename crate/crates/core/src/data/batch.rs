use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::Sample;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Images and caption layouts for a group of samples.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, 3, size, size]`.
    pub images: Tensor,
    /// `B × context_len` decoder input ids, row-major.
    pub inputs: Vec<usize>,
    /// `B × context_len` next-token targets, row-major.
    pub targets: Vec<usize>,
    pub size: usize,
}

impl Batch {
    pub fn from_samples(samples: &[&Sample]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Data("empty batch".into()))?;
        let img_shape = first.image.shape().to_vec();
        let ctx = first.layout.context_len();
        let mut images = Vec::with_capacity(samples.len() * first.image.numel());
        let mut inputs = Vec::with_capacity(samples.len() * ctx);
        let mut targets = Vec::with_capacity(samples.len() * ctx);
        for s in samples {
            if s.image.shape() != img_shape.as_slice() || s.layout.context_len() != ctx {
                return Err(Error::Data("samples in a batch disagree in shape".into()));
            }
            images.extend_from_slice(s.image.data());
            inputs.extend_from_slice(s.layout.input());
            targets.extend_from_slice(s.layout.targets());
        }
        let mut shape = vec![samples.len()];
        shape.extend(img_shape);
        Ok(Self {
            images: Tensor::new(shape, images)?,
            inputs,
            targets,
            size: samples.len(),
        })
    }
}

/// Index groups for one epoch: a seeded shuffle split into `batch_size`
/// chunks, keeping the final partial chunk.
pub fn epoch_order(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::Data("dataset is empty".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Batches for one epoch. Contrastive training needs at least two pairs
/// per batch; `allow_single` lifts that for tests.
pub fn make_batches(
    samples: &[Sample],
    batch_size: usize,
    seed: u64,
    epoch: u64,
    allow_single: bool,
) -> Result<Vec<Batch>> {
    if batch_size < 2 && !allow_single {
        return Err(Error::Config(format!(
            "batch size {batch_size} is below 2, which makes the contrastive loss degenerate"
        )));
    }
    epoch_order(samples.len(), batch_size, seed, epoch)?
        .iter()
        .map(|idx| Batch::from_samples(&idx.iter().map(|&i| &samples[i]).collect::<Vec<_>>()))
        .collect()
}
