//! Datasets, augmentation, mixup and metrics persistence.

mod augment;
mod cifar;
mod metrics_csv;
mod mixup;
mod synth;

pub use augment::{augment, normalize, AugmentConfig, Normalization};
pub use cifar::{
    load_cifar_binary, read_cifar_records, write_cifar_binary, write_cifar_records, CifarRecord,
    CifarVariant, CIFAR_PIXELS,
};
pub use metrics_csv::{
    format_significant, read_metrics_csv, write_metrics_csv, CsvMetricsSink, METRICS_HEADER,
};
pub use mixup::{mixup, mixup_with, one_hot};
pub use synth::{synth_dataset, SynthKind, SynthSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Images with integer labels. Pixels are stored flat, image after image,
/// each image `C x H x W` row-major; raw pixels lie in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImageSet {
    pixels: Vec<f64>,
    labels: Vec<usize>,
    image_shape: [usize; 3],
    classes: usize,
}

impl LabeledImageSet {
    pub fn new(pixels: Vec<f64>, labels: Vec<usize>, image_shape: [usize; 3], classes: usize) -> Result<Self> {
        let per_image: usize = image_shape.iter().product();
        if per_image == 0 {
            return Err(Error::Invalid(format!("image shape {image_shape:?} has a zero dimension")));
        }
        if pixels.len() != labels.len() * per_image {
            return Err(Error::Invalid(format!(
                "{} pixels for {} images of shape {image_shape:?}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(Self {
            pixels,
            labels,
            image_shape,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let per: usize = self.image_shape.iter().product();
        &self.pixels[i * per..(i + 1) * per]
    }

    /// Stacks the selected images into an `N x C x H x W` tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let per: usize = self.image_shape.iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Invalid(format!("image {i} of {}", self.len())));
            }
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let [c, h, w] = self.image_shape;
        Ok((Tensor::new(&[indices.len(), c, h, w], data)?, labels))
    }

    /// Per-class sample counts.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}
