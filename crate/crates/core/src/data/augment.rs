//! Training-time image augmentation: per-channel normalization, horizontal
//! flip, zero padding and random crop, applied per image in that order.

use rand::Rng;

use super::LabeledImageSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-channel mean and standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Channel statistics of a (training) split. Channels with zero spread
    /// get std 1 so normalization stays finite.
    pub fn from_set(set: &LabeledImageSet) -> Self {
        let [c, h, w] = set.image_shape();
        let plane = h * w;
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for i in 0..set.len() {
            for (ch, values) in set.image(i).chunks_exact(plane).enumerate() {
                for &v in values {
                    mean[ch] += v;
                    sq[ch] += v * v;
                }
            }
        }
        let count = (set.len() * plane).max(1) as f64;
        let std = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, &s)| {
                *m /= count;
                let var = (s / count - *m * *m).max(0.0);
                if var > 1e-12 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Inverse of the normalization applied by [`normalize`].
    pub fn denormalize(&self, batch: &Tensor) -> Result<Tensor> {
        self.apply(batch, |v, m, s| v * s + m)
    }

    fn apply(&self, batch: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor> {
        let (n, c, h, w) = batch.dims4()?;
        if c != self.channels() {
            return Err(Error::Invalid(format!(
                "normalization has {} channels, batch has {c}",
                self.channels()
            )));
        }
        let plane = h * w;
        let mut out = batch.clone();
        for (k, chunk) in out.data_mut().chunks_exact_mut(plane).enumerate() {
            let ch = k % c;
            for v in chunk {
                *v = f(*v, self.mean[ch], self.std[ch]);
            }
        }
        debug_assert_eq!(out.len(), n * c * plane);
        Ok(out)
    }
}

/// Normalizes every channel by the stored mean and standard deviation.
pub fn normalize(batch: &Tensor, norm: &Normalization) -> Result<Tensor> {
    norm.apply(batch, |v, m, s| (v - m) / s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub normalize: bool,
    pub flip: bool,
    pub flip_probability: f64,
    pub crop_enabled: bool,
    pub pad: usize,
    /// Side length of the square crop; `None` crops back to the input size.
    pub crop: Option<usize>,
    /// Beta parameter for mixup; `None` disables it.
    pub mixup: Option<f64>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            normalize: true,
            flip: true,
            flip_probability: 0.5,
            crop_enabled: true,
            pad: 4,
            crop: Some(32),
            mixup: None,
        }
    }
}

impl AugmentConfig {
    /// Normalization only.
    pub fn normalize_only() -> Self {
        Self {
            normalize: true,
            flip: false,
            flip_probability: 0.0,
            crop_enabled: false,
            pad: 0,
            crop: None,
            mixup: None,
        }
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::Invalid(format!(
                "flip probability {} outside [0, 1]",
                self.flip_probability
            )));
        }
        if let Some(a) = self.mixup {
            if !(a.is_finite() && a > 0.0) {
                return Err(Error::Invalid(format!("mixup parameter must be positive, got {a}")));
            }
        }
        if self.crop_enabled {
            let crop = self.crop.unwrap_or(height.max(width));
            if crop > height + 2 * self.pad || crop > width + 2 * self.pad {
                return Err(Error::Invalid(format!(
                    "crop {crop} larger than padded image {}x{}",
                    height + 2 * self.pad,
                    width + 2 * self.pad
                )));
            }
        }
        Ok(())
    }

    /// Output spatial size for `height x width` inputs.
    pub fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        match (self.crop_enabled, self.crop) {
            (true, Some(c)) => (c, c),
            _ => (height, width),
        }
    }
}

/// Augments an `N x C x H x W` batch image by image. Padding happens after
/// normalization, so padded pixels are zero in normalized space.
pub fn augment<R: Rng + ?Sized>(
    batch: &Tensor,
    norm: &Normalization,
    config: &AugmentConfig,
    rng: &mut R,
) -> Result<Tensor> {
    let (n, c, h, w) = batch.dims4()?;
    config.validate(h, w)?;
    let base = if config.normalize {
        normalize(batch, norm)?
    } else {
        batch.clone()
    };
    let (oh, ow) = config.output_size(h, w);
    let pad = if config.crop_enabled { config.pad } else { 0 };
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![0.0; n * c * oh * ow];
    let src = base.data();
    for i in 0..n {
        let flip = config.flip && rng.gen::<f64>() < config.flip_probability;
        let (dy, dx) = if config.crop_enabled {
            (rng.gen_range(0..=ph - oh), rng.gen_range(0..=pw - ow))
        } else {
            (0, 0)
        };
        for ch in 0..c {
            let plane = &src[(i * c + ch) * h * w..(i * c + ch + 1) * h * w];
            let dst = &mut out[(i * c + ch) * oh * ow..(i * c + ch + 1) * oh * ow];
            for y in 0..oh {
                // Coordinates in the padded image, then in the source.
                let sy = (y + dy) as isize - pad as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..ow {
                    let sx = (x + dx) as isize - pad as isize;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let sx = if flip { w - 1 - sx as usize } else { sx as usize };
                    dst[y * ow + x] = plane[sy as usize * w + sx];
                }
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}
