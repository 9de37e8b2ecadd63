//! Mixup: convex combinations of sample pairs and their labels.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `N x K` one-hot label matrix.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::LabelOutOfRange { label: l, classes });
        }
        data[i * classes + l] = 1.0;
    }
    Tensor::new(&[labels.len(), classes], data)
}

/// Draws `lambda ~ Beta(a, a)` once for the batch and mixes every sample
/// with a randomly permuted partner. Batches of fewer than two samples are
/// returned unchanged.
pub fn mixup<R: Rng + ?Sized>(
    images: &Tensor,
    labels: &Tensor,
    a: f64,
    rng: &mut R,
) -> Result<(Tensor, Tensor)> {
    if !(a.is_finite() && a > 0.0) {
        return Err(Error::Invalid(format!("mixup parameter must be positive, got {a}")));
    }
    let n = images.shape()[0];
    if n < 2 {
        return Ok((images.clone(), labels.clone()));
    }
    let beta = Beta::new(a, a).map_err(|e| Error::Invalid(e.to_string()))?;
    let lambda = beta.sample(rng);
    let mut partners: Vec<usize> = (0..n).collect();
    partners.shuffle(rng);
    mixup_with(images, labels, lambda, &partners)
}

/// Deterministic core of [`mixup`]: sample `i` becomes
/// `lambda * x_i + (1 - lambda) * x_partners[i]`, labels likewise.
pub fn mixup_with(
    images: &Tensor,
    labels: &Tensor,
    lambda: f64,
    partners: &[usize],
) -> Result<(Tensor, Tensor)> {
    let n = images.shape()[0];
    if labels.shape().len() != 2 || labels.shape()[0] != n || partners.len() != n {
        return Err(Error::Invalid(format!(
            "mixup needs {n} label rows and partners, got labels {:?} and {} partners",
            labels.shape(),
            partners.len()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Invalid(format!("mixing weight {lambda} outside [0, 1]")));
    }
    let mix = |t: &Tensor| -> Result<Tensor> {
        let row = t.len() / n;
        let src = t.data();
        let mut out = Vec::with_capacity(t.len());
        for (i, &j) in partners.iter().enumerate() {
            if j >= n {
                return Err(Error::Invalid(format!("partner {j} of {n}")));
            }
            let (xi, xj) = (&src[i * row..(i + 1) * row], &src[j * row..(j + 1) * row]);
            out.extend(xi.iter().zip(xj).map(|(&a, &b)| lambda * a + (1.0 - lambda) * b));
        }
        Tensor::new(t.shape(), out)
    };
    Ok((mix(images)?, mix(labels)?))
}
