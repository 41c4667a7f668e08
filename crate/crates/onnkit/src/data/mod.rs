//! Dataset ingestion and generation.
//!
//! Binary formats (MNIST IDX, CIFAR-10 batches) are parsed bit-exactly with
//! strict length checking. Two deterministic synthetic generators provide
//! desk-scale stand-ins: textured-shape segmentation scenes and rendered
//! digit glyphs for classification experiments when the real archives are
//! not on disk.

mod cifar;
mod idx;
mod synth;

pub use cifar::load_cifar10_bin;
pub use idx::{load_mnist_idx, write_idx_images, write_idx_labels};
pub use synth::{
    gen_synthetic_digits, gen_synthetic_seg, gen_synthetic_seg_detailed, DigitParams, ShapeInfo,
};

use crate::error::{Error, Result};
use crate::rng::{derive, rng_from_seed};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;

#[derive(Clone, Debug)]
pub enum Targets {
    Classes(Vec<usize>),
    /// Binary masks shaped n x 1 x h x w.
    Masks(Tensor),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(v) => v.len(),
            Targets::Masks(t) => t.batch_size(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn gather(&self, indices: &[usize]) -> Targets {
        match self {
            Targets::Classes(v) => Targets::Classes(indices.iter().map(|&i| v[i]).collect()),
            Targets::Masks(t) => Targets::Masks(t.gather(indices)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LabeledDataset {
    /// n x c x h x w, values in [0, 1].
    pub images: Tensor,
    pub targets: Targets,
    pub split: String,
}

impl LabeledDataset {
    pub fn new(images: Tensor, targets: Targets, split: impl Into<String>) -> Result<Self> {
        let ds = Self {
            images,
            targets,
            split: split.into(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.images.batch_size()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.shape().len() != 4 {
            return Err(Error::Data(format!(
                "images must be n x c x h x w, got {:?}",
                self.images.shape()
            )));
        }
        if self.targets.len() != self.len() {
            return Err(Error::Data(format!(
                "image/target count mismatch: {} images, {} targets",
                self.len(),
                self.targets.len()
            )));
        }
        if let Targets::Masks(m) = &self.targets {
            if m.batch_size() != self.len() {
                return Err(Error::Data("mask count mismatch".into()));
            }
            if !m.data().iter().all(|&v| v == 0.0 || v == 1.0) {
                return Err(Error::Data("masks must be binary".into()));
            }
        }
        Ok(())
    }

    pub fn class_labels(&self) -> Result<&[usize]> {
        match &self.targets {
            Targets::Classes(v) => Ok(v),
            Targets::Masks(_) => Err(Error::Data("expected class labels, found masks".into())),
        }
    }

    pub fn masks(&self) -> Result<&Tensor> {
        match &self.targets {
            Targets::Masks(m) => Ok(m),
            Targets::Classes(_) => Err(Error::Data("expected masks, found class labels".into())),
        }
    }

    pub fn subset(&self, indices: &[usize], split: impl Into<String>) -> LabeledDataset {
        LabeledDataset {
            images: self.images.gather(indices),
            targets: self.targets.gather(indices),
            split: split.into(),
        }
    }

    /// First `n` samples, without reshuffling.
    pub fn take(&self, n: usize, split: impl Into<String>) -> LabeledDataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx, split)
    }

    /// Deterministically shuffles sample order.
    pub fn shuffled(&self, seed: u64) -> LabeledDataset {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let mut rng = rng_from_seed(derive(seed, "dataset-shuffle"));
        idx.shuffle(&mut rng);
        self.subset(&idx, self.split.clone())
    }

    /// Number of classes (classification datasets).
    pub fn n_classes(&self) -> Result<usize> {
        Ok(self.class_labels()?.iter().copied().max().unwrap_or(0) + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_binary_invariant_enforced() {
        let images = Tensor::zeros(&[2, 1, 4, 4]);
        let bad = Tensor::from_fn(&[2, 1, 4, 4], |i| if i == 3 { 0.5 } else { 0.0 });
        assert!(LabeledDataset::new(images.clone(), Targets::Masks(bad), "t").is_err());
        let good = Tensor::zeros(&[2, 1, 4, 4]);
        assert!(LabeledDataset::new(images, Targets::Masks(good), "t").is_ok());
    }

    #[test]
    fn count_mismatch_rejected() {
        let images = Tensor::zeros(&[3, 1, 2, 2]);
        let err = LabeledDataset::new(images, Targets::Classes(vec![0, 1]), "t").unwrap_err();
        assert!(err.to_string().contains("mismatch"));
    }

    #[test]
    fn shuffle_is_deterministic_permutation() {
        let images = Tensor::from_fn(&[5, 1, 1, 1], |i| i as f64);
        let ds = LabeledDataset::new(images, Targets::Classes(vec![0, 1, 2, 3, 4]), "t").unwrap();
        let a = ds.shuffled(9);
        let b = ds.shuffled(9);
        assert_eq!(a.images.data(), b.images.data());
        let mut seen: Vec<f64> = a.images.data().to_vec();
        seen.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert_eq!(seen, vec![0.0, 1.0, 2.0, 3.0, 4.0]);
        for (img, lab) in a.images.data().iter().zip(a.class_labels().unwrap()) {
            assert_eq!(*img as usize, *lab);
        }
    }
}
