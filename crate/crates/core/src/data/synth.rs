//! Seeded synthetic datasets for desk-scale experiments.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::LabeledImageSet;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    /// Gaussian clusters around random per-class centroids.
    Blobs,
    /// Interleaved spiral arms in the first two features.
    Spiral,
    /// Sinusoidal stripes whose orientation encodes the class.
    StripedImages,
}

impl SynthKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SynthKind::Blobs => "blobs",
            SynthKind::Spiral => "spiral",
            SynthKind::StripedImages => "striped-images",
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(SynthKind::Blobs),
            "spiral" => Ok(SynthKind::Spiral),
            "striped-images" => Ok(SynthKind::StripedImages),
            other => Err(Error::Parse(format!(
                "unknown synthetic dataset `{other}` (expected blobs, spiral or striped-images)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub samples: usize,
    pub classes: usize,
    pub noise: f64,
    pub image_shape: [usize; 3],
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.samples < self.classes {
            return Err(Error::Invalid(format!(
                "need at least one sample per class ({} samples, {} classes)",
                self.samples, self.classes
            )));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::Invalid(format!("noise must be non-negative, got {}", self.noise)));
        }
        let features: usize = self.image_shape.iter().product();
        if features == 0 {
            return Err(Error::Invalid(format!("image shape {:?} has a zero dimension", self.image_shape)));
        }
        if self.kind == SynthKind::Spiral && features < 2 {
            return Err(Error::Invalid("spiral data needs at least two features".into()));
        }
        Ok(())
    }
}

/// Generates a dataset with labels assigned round-robin, so class counts
/// differ by at most one. Pixels are clamped to `[0, 1]`.
pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<LabeledImageSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [c, h, w] = spec.image_shape;
    let features = c * h * w;
    let k = spec.classes;
    let labels: Vec<usize> = (0..spec.samples).map(|i| i % k).collect();
    let mut pixels = Vec::with_capacity(spec.samples * features);

    match spec.kind {
        SynthKind::Blobs => {
            let centroids: Vec<Vec<f64>> = (0..k)
                .map(|_| (0..features).map(|_| rng.gen_range(0.2..0.8)).collect())
                .collect();
            for &label in &labels {
                for &m in &centroids[label] {
                    let z: f64 = rng.sample(StandardNormal);
                    pixels.push((m + spec.noise * z).clamp(0.0, 1.0));
                }
            }
        }
        SynthKind::Spiral => {
            for &label in &labels {
                let t: f64 = rng.gen_range(0.05..1.0);
                let angle = 2.0 * PI * label as f64 / k as f64 + 1.5 * PI * t;
                let zx: f64 = rng.sample(StandardNormal);
                let zy: f64 = rng.sample(StandardNormal);
                let x = t * angle.cos() + spec.noise * zx;
                let y = t * angle.sin() + spec.noise * zy;
                pixels.push((0.5 + 0.5 * x).clamp(0.0, 1.0));
                pixels.push((0.5 + 0.5 * y).clamp(0.0, 1.0));
                pixels.extend(std::iter::repeat(0.5).take(features - 2));
            }
        }
        SynthKind::StripedImages => {
            let period = (h.max(w) as f64 / 2.0).max(2.0);
            for &label in &labels {
                let theta = PI * label as f64 / k as f64;
                let (dx, dy) = (theta.cos(), theta.sin());
                let phase: f64 = rng.gen_range(0.0..2.0 * PI);
                let contrast: f64 = rng.gen_range(0.25..0.45);
                for ch in 0..c {
                    let channel_shift = ch as f64 * PI / 3.0;
                    for y in 0..h {
                        for x in 0..w {
                            let u = (x as f64 * dx + y as f64 * dy) * 2.0 * PI / period;
                            let z: f64 = rng.sample(StandardNormal);
                            let v = 0.5 + contrast * (u + phase + channel_shift).sin() + spec.noise * z;
                            pixels.push(v.clamp(0.0, 1.0));
                        }
                    }
                }
            }
        }
    }
    LabeledImageSet::new(pixels, labels, spec.image_shape, k)
}
