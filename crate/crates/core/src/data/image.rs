use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImagePipelineConfig {
    pub size: usize,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for ImagePipelineConfig {
    fn default() -> Self {
        Self {
            size: 288,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }
}

impl ImagePipelineConfig {
    pub fn with_size(size: usize) -> Self {
        Self {
            size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::Config("image.size must be positive".into()));
        }
        if self.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("image.std entries must be positive".into()));
        }
        Ok(())
    }
}

/// Planar RGB with values in `[0, 1]`: `data[c][y * width + x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbPlanes {
    pub width: usize,
    pub height: usize,
    pub data: [Vec<f64>; 3],
}

impl RgbPlanes {
    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = [vec![0.0; w * h], vec![0.0; w * h], vec![0.0; w * h]];
        for (i, px) in img.pixels().enumerate() {
            for (plane, &v) in data.iter_mut().zip(&px.0) {
                plane[i] = v as f64 / 255.0;
            }
        }
        Self {
            width: w,
            height: h,
            data,
        }
    }
}

/// Bilinear resampling of one plane with half-pixel centers: output pixel
/// `i` samples input coordinate `(i + 0.5) · in / out − 0.5`, clamped to
/// the image.
pub fn resize_bilinear(src: &[f64], w: usize, h: usize, out_w: usize, out_h: usize) -> Vec<f64> {
    let coords = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|i| {
                let x = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
                let x0 = x.floor() as usize;
                let x1 = (x0 + 1).min(n_in - 1);
                (x0, x1, x - x0 as f64)
            })
            .collect()
    };
    let xs = coords(w, out_w);
    let ys = coords(h, out_h);
    let mut out = Vec::with_capacity(out_w * out_h);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Resize to `size × size`, then normalize per channel: `(x − mean) / std`.
pub fn preprocess(planes: &RgbPlanes, cfg: &ImagePipelineConfig) -> Tensor {
    let s = cfg.size;
    let mut data = Vec::with_capacity(3 * s * s);
    for c in 0..3 {
        let plane = if planes.width == s && planes.height == s {
            planes.data[c].clone()
        } else {
            resize_bilinear(&planes.data[c], planes.width, planes.height, s, s)
        };
        data.extend(plane.into_iter().map(|v| (v - cfg.mean[c]) / cfg.std[c]));
    }
    Tensor::from_parts(vec![3, s, s], data)
}

pub fn load_image(path: &Path, cfg: &ImagePipelineConfig) -> Result<Tensor> {
    let img =
        image::open(path).map_err(|e| Error::Data(format!("cannot decode image {}: {e}", path.display())))?;
    Ok(preprocess(&RgbPlanes::from_rgb8(&img.to_rgb8()), cfg))
}
