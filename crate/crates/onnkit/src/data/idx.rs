//! MNIST IDX format, bit-exact.
//!
//! Images: big-endian magic 0x00000803, then count/rows/cols as big-endian
//! u32, then unsigned-byte pixels. Labels: magic 0x00000801, count, bytes.
//! Every malformation (wrong magic, truncation, trailing bytes, count
//! mismatch) is rejected with a distinct message.

use super::{LabeledDataset, Targets};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::fs;
use std::path::Path;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, what: &str, path: &Path) -> Result<u32> {
    if bytes.len() < at + 4 {
        return Err(Error::Data(format!(
            "{}: truncated while reading {what}",
            path.display()
        )));
    }
    Ok(u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]))
}

pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let img_bytes = fs::read(images_path)
        .map_err(|e| Error::Data(format!("{}: {e}", images_path.display())))?;
    let magic = be_u32(&img_bytes, 0, "magic", images_path)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Data(format!(
            "{}: wrong magic 0x{magic:08x}, expected 0x{IMAGES_MAGIC:08x}",
            images_path.display()
        )));
    }
    let n = be_u32(&img_bytes, 4, "image count", images_path)? as usize;
    let rows = be_u32(&img_bytes, 8, "rows", images_path)? as usize;
    let cols = be_u32(&img_bytes, 12, "cols", images_path)? as usize;
    let expected = 16 + n * rows * cols;
    if img_bytes.len() < expected {
        return Err(Error::Data(format!(
            "{}: truncated payload, need {expected} bytes, have {}",
            images_path.display(),
            img_bytes.len()
        )));
    }
    if img_bytes.len() > expected {
        return Err(Error::Data(format!(
            "{}: trailing bytes, expected exactly {expected}, have {}",
            images_path.display(),
            img_bytes.len()
        )));
    }

    let lab_bytes = fs::read(labels_path)
        .map_err(|e| Error::Data(format!("{}: {e}", labels_path.display())))?;
    let lmagic = be_u32(&lab_bytes, 0, "magic", labels_path)?;
    if lmagic != LABELS_MAGIC {
        return Err(Error::Data(format!(
            "{}: wrong magic 0x{lmagic:08x}, expected 0x{LABELS_MAGIC:08x}",
            labels_path.display()
        )));
    }
    let n_labels = be_u32(&lab_bytes, 4, "label count", labels_path)? as usize;
    let lab_expected = 8 + n_labels;
    if lab_bytes.len() < lab_expected {
        return Err(Error::Data(format!(
            "{}: truncated payload, need {lab_expected} bytes, have {}",
            labels_path.display(),
            lab_bytes.len()
        )));
    }
    if lab_bytes.len() > lab_expected {
        return Err(Error::Data(format!(
            "{}: trailing bytes, expected exactly {lab_expected}, have {}",
            labels_path.display(),
            lab_bytes.len()
        )));
    }
    if n != n_labels {
        return Err(Error::Data(format!(
            "count mismatch: {n} images in {} but {n_labels} labels in {}",
            images_path.display(),
            labels_path.display()
        )));
    }

    let images = Tensor::new(
        vec![n, 1, rows, cols],
        img_bytes[16..].iter().map(|&b| b as f64 / 255.0).collect(),
    )?;
    let labels: Vec<usize> = lab_bytes[8..].iter().map(|&b| b as usize).collect();
    LabeledDataset::new(images, Targets::Classes(labels), "idx")
}

/// Writes pixel bytes as an IDX image file (`pixels` is n * rows * cols).
pub fn write_idx_images(path: &Path, pixels: &[u8], n: usize, rows: usize, cols: usize) -> Result<()> {
    if pixels.len() != n * rows * cols {
        return Err(Error::InvalidSpec(format!(
            "pixel count {} does not match {n} x {rows} x {cols}",
            pixels.len()
        )));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(n as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    out.extend_from_slice(pixels);
    fs::write(path, out)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("onnkit-idx-test");
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn hand_built_fixture_roundtrips_exact_pixels() {
        let img = tmp("imgs.idx");
        let lab = tmp("labs.idx");
        let pixels: Vec<u8> = (0..32).map(|i| (i * 8) as u8).collect();
        write_idx_images(&img, &pixels, 2, 4, 4).unwrap();
        write_idx_labels(&lab, &[7, 3]).unwrap();
        let ds = load_mnist_idx(&img, &lab).unwrap();
        assert_eq!(ds.images.shape(), &[2, 1, 4, 4]);
        for (v, b) in ds.images.data().iter().zip(&pixels) {
            assert_eq!(*v, *b as f64 / 255.0);
        }
        assert_eq!(ds.class_labels().unwrap(), &[7, 3]);
    }

    #[test]
    fn wrong_magic_named_distinctly() {
        let img = tmp("badmagic.idx");
        let lab = tmp("labs2.idx");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&0x0000_0802u32.to_be_bytes());
        bytes.extend_from_slice(&1u32.to_be_bytes());
        bytes.extend_from_slice(&1u32.to_be_bytes());
        bytes.extend_from_slice(&1u32.to_be_bytes());
        bytes.push(0);
        fs::write(&img, bytes).unwrap();
        write_idx_labels(&lab, &[0]).unwrap();
        let err = load_mnist_idx(&img, &lab).unwrap_err();
        assert!(err.to_string().contains("wrong magic"), "{err}");
    }

    #[test]
    fn count_mismatch_is_its_own_error() {
        let img = tmp("imgs3.idx");
        let lab = tmp("labs3.idx");
        write_idx_images(&img, &[0u8; 16], 1, 4, 4).unwrap();
        write_idx_labels(&lab, &[0, 1]).unwrap();
        let err = load_mnist_idx(&img, &lab).unwrap_err();
        assert!(err.to_string().contains("count mismatch"), "{err}");
    }
}
