//! CIFAR-10 binary batches: 3073-byte records, one label byte followed by
//! 3 x 1024 channel-planar pixels.

use super::{LabeledDataset, Targets};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::fs;
use std::path::Path;

const RECORD: usize = 3073;
const SIDE: usize = 32;

pub fn load_cifar10_bin(paths: &[impl AsRef<Path>]) -> Result<LabeledDataset> {
    if paths.is_empty() {
        return Err(Error::Data("no CIFAR-10 batch files given".into()));
    }
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for p in paths {
        let p = p.as_ref();
        let bytes = fs::read(p).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
        if bytes.is_empty() || bytes.len() % RECORD != 0 {
            return Err(Error::Data(format!(
                "{}: size {} is not a positive multiple of the {RECORD}-byte record",
                p.display(),
                bytes.len()
            )));
        }
        for rec in bytes.chunks(RECORD) {
            let label = rec[0] as usize;
            if label > 9 {
                return Err(Error::Data(format!(
                    "{}: label byte {label} out of range 0..=9",
                    p.display()
                )));
            }
            labels.push(label);
            pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
        }
    }
    let n = labels.len();
    let images = Tensor::new(vec![n, 3, SIDE, SIDE], pixels)?;
    LabeledDataset::new(images, Targets::Classes(labels), "cifar10")
}
