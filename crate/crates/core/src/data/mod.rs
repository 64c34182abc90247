//! Labeled datasets: procedural glyphs, domain-shift transforms, a 2-D toy
//! set for flow tests, and an IDX reader for real digit files.

mod domain;
mod glyphs;
mod idx;

pub use domain::{apply_domain, DomainKind, DomainSpec};
pub use glyphs::generate_glyphs;
pub use idx::{load_idx, parse_idx_images, parse_idx_labels};

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

/// Images (or feature vectors) with integer labels.
///
/// `images` has shape `[n, ..sample_shape]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub domain_tag: String,
    pub seed: u64,
}

impl Dataset {
    pub fn new(
        images: Tensor,
        labels: Vec<usize>,
        class_count: usize,
        domain_tag: impl Into<String>,
        seed: u64,
    ) -> Result<Self> {
        if images.rank() < 2 || images.shape()[0] != labels.len() {
            return Err(Error::Domain(format!(
                "dataset has {} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if class_count == 0 {
            return Err(Error::Domain("class count must be positive".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Domain(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(Self {
            images,
            labels,
            class_count,
            domain_tag: domain_tag.into(),
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    pub fn image(&self, i: usize) -> Result<Tensor> {
        self.images.slice_rows(i, i + 1)
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let images = self.images.gather_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((images, labels))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let (images, labels) = self.batch(indices)?;
        Self::new(images, labels, self.class_count, self.domain_tag.clone(), self.seed)
    }

    pub fn append(&mut self, images: &Tensor, labels: &[usize]) -> Result<()> {
        if images.shape().first() != Some(&labels.len()) {
            return Err(Error::Domain("appended images and labels disagree in count".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.class_count) {
            return Err(Error::Domain(format!("label {bad} out of range")));
        }
        self.images.append_rows(images)?;
        self.labels.extend_from_slice(labels);
        Ok(())
    }

    pub fn indices_of_class(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Two isotropic blobs in the plane: class 0 around (−2, 0), class 1 around (+2, 0),
/// each with variance 0.25 per coordinate.
pub fn two_gaussians_2d(n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || n % 2 != 0 {
        return Err(Error::Domain(format!("two_gaussians_2d needs a positive even count, got {n}")));
    }
    let mut rng = stream(seed, Stream::Data);
    let noise = Normal::new(0.0, 0.5).expect("valid normal");
    let half = n / 2;
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for (class, cx) in [(0, -2.0), (1, 2.0)] {
        for _ in 0..half {
            data.push(cx + noise.sample(&mut rng));
            data.push(noise.sample(&mut rng));
            labels.push(class);
        }
    }
    Dataset::new(Tensor::new(vec![n, 2], data)?, labels, 2, "two_gaussians", seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_gaussians_basics() {
        let ds = two_gaussians_2d(2, 1).unwrap();
        assert_eq!(ds.labels, vec![0, 1]);
        assert!(matches!(two_gaussians_2d(3, 1), Err(Error::Domain(_))));
        assert_eq!(two_gaussians_2d(100, 9).unwrap(), two_gaussians_2d(100, 9).unwrap());
    }

    #[test]
    fn two_gaussians_class_mean() {
        let ds = two_gaussians_2d(20_000, 3).unwrap();
        let idx = ds.indices_of_class(0);
        assert_eq!(idx.len(), 10_000);
        let (mut mx, mut my) = (0.0, 0.0);
        for &i in &idx {
            mx += ds.images.data()[2 * i];
            my += ds.images.data()[2 * i + 1];
        }
        mx /= idx.len() as f64;
        my /= idx.len() as f64;
        assert!((mx + 2.0).abs() < 0.05 && my.abs() < 0.05, "({mx}, {my})");
    }

    #[test]
    fn dataset_validates_labels() {
        let images = Tensor::zeros(&[2, 3]);
        assert!(Dataset::new(images.clone(), vec![0, 5], 3, "t", 0).is_err());
        assert!(Dataset::new(images.clone(), vec![0], 3, "t", 0).is_err());
        let mut ds = Dataset::new(images, vec![0, 2], 3, "t", 0).unwrap();
        ds.append(&Tensor::ones(&[1, 3]), &[1]).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.class_counts(), vec![1, 1, 1]);
    }
}
