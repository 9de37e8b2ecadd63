//! CIFAR-10/100 binary format.
//!
//! CIFAR-10 records are `label(1) + pixels(3072)`; CIFAR-100 records are
//! `coarse(1) + fine(1) + pixels(3072)`. Pixels are three 32x32 planes
//! (R, G, B), each row-major.

use std::fs;
use std::path::Path;

use super::LabeledImageSet;
use crate::error::{Error, Result};

pub const CIFAR_PIXELS: usize = 3 * 32 * 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn record_len(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1 + CIFAR_PIXELS,
            CifarVariant::Cifar100 => 2 + CIFAR_PIXELS,
        }
    }

    pub fn classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CifarRecord {
    /// Coarse label (CIFAR-100 only; 0 for CIFAR-10).
    pub coarse: u8,
    pub label: u8,
    pub pixels: Vec<u8>,
}

pub fn read_cifar_records(path: &Path, variant: CifarVariant) -> Result<Vec<CifarRecord>> {
    let bytes = fs::read(path)?;
    let rec = variant.record_len();
    if bytes.len() % rec != 0 {
        return Err(Error::Cifar {
            path: path.to_path_buf(),
            detail: format!(
                "{} bytes is not a whole number of {rec}-byte records (truncated?)",
                bytes.len()
            ),
        });
    }
    Ok(bytes
        .chunks_exact(rec)
        .map(|chunk| match variant {
            CifarVariant::Cifar10 => CifarRecord {
                coarse: 0,
                label: chunk[0],
                pixels: chunk[1..].to_vec(),
            },
            CifarVariant::Cifar100 => CifarRecord {
                coarse: chunk[0],
                label: chunk[1],
                pixels: chunk[2..].to_vec(),
            },
        })
        .collect())
}

pub fn write_cifar_records(path: &Path, records: &[CifarRecord], variant: CifarVariant) -> Result<()> {
    let mut out = Vec::with_capacity(records.len() * variant.record_len());
    for r in records {
        if r.pixels.len() != CIFAR_PIXELS {
            return Err(Error::Invalid(format!(
                "CIFAR record needs {CIFAR_PIXELS} pixel bytes, got {}",
                r.pixels.len()
            )));
        }
        if variant == CifarVariant::Cifar100 {
            out.push(r.coarse);
        }
        out.push(r.label);
        out.extend_from_slice(&r.pixels);
    }
    fs::write(path, out)?;
    Ok(())
}

/// Loads a CIFAR binary batch file; pixels are scaled to `[0, 1]` and
/// CIFAR-100 uses the fine label.
pub fn load_cifar_binary(path: &Path, variant: CifarVariant) -> Result<LabeledImageSet> {
    let records = read_cifar_records(path, variant)?;
    let classes = variant.classes();
    let mut pixels = Vec::with_capacity(records.len() * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(records.len());
    for r in &records {
        let label = r.label as usize;
        if label >= classes {
            return Err(Error::Cifar {
                path: path.to_path_buf(),
                detail: format!("label {label} out of range for {classes} classes"),
            });
        }
        labels.push(label);
        pixels.extend(r.pixels.iter().map(|&b| b as f64 / 255.0));
    }
    LabeledImageSet::new(pixels, labels, [3, 32, 32], classes)
}

/// Writes a `3 x 32 x 32` image set back to the binary format, quantizing
/// pixels to bytes.
pub fn write_cifar_binary(path: &Path, set: &LabeledImageSet, variant: CifarVariant) -> Result<()> {
    if set.image_shape() != [3, 32, 32] {
        return Err(Error::Invalid(format!(
            "CIFAR images are 3x32x32, got {:?}",
            set.image_shape()
        )));
    }
    let records: Vec<CifarRecord> = (0..set.len())
        .map(|i| CifarRecord {
            coarse: 0,
            label: set.labels()[i] as u8,
            pixels: set
                .image(i)
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect(),
        })
        .collect();
    write_cifar_records(path, &records, variant)
}
