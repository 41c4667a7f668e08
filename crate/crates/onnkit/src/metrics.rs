//! Evaluation metrics: classification accuracy with confusion matrices, and
//! mean intersection-over-union for binary segmentation.

use crate::data::Targets;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    Classification,
    Segmentation,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    /// Accuracy for classification, mIoU for segmentation.
    pub metric: f64,
    pub accuracy: Option<f64>,
    pub miou: Option<f64>,
    /// Row-major k x k counts (true class by predicted class). For
    /// segmentation this is the 2 x 2 pixel-level matrix.
    pub confusion: Vec<u64>,
    pub n_classes: usize,
    pub n_samples: usize,
}

/// Argmax with ties toward the lowest index.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Scores raw network outputs against targets. Classification outputs are
/// `n x k` logits; segmentation outputs are thresholded at 0.5 against
/// binary masks, with empty-union classes skipped in the mIoU mean.
pub fn evaluate(outputs: &Tensor, targets: &Targets) -> Result<EvalReport> {
    match targets {
        Targets::Classes(labels) => {
            let n = outputs.batch_size();
            if labels.len() != n {
                return Err(Error::ShapeMismatch {
                    location: "evaluate".into(),
                    expected: format!("{n} labels"),
                    got: format!("{}", labels.len()),
                });
            }
            let k = outputs.sample_len();
            let n_classes = k.max(labels.iter().copied().max().unwrap_or(0) + 1);
            let mut confusion = vec![0u64; n_classes * n_classes];
            let mut correct = 0u64;
            for (i, &y) in labels.iter().enumerate() {
                let pred = argmax(outputs.sample(i));
                confusion[y * n_classes + pred] += 1;
                if pred == y {
                    correct += 1;
                }
            }
            let accuracy = correct as f64 / n as f64;
            Ok(EvalReport {
                task: Task::Classification,
                metric: accuracy,
                accuracy: Some(accuracy),
                miou: None,
                confusion,
                n_classes,
                n_samples: n,
            })
        }
        Targets::Masks(masks) => {
            if outputs.len() != masks.len() {
                return Err(Error::ShapeMismatch {
                    location: "evaluate".into(),
                    expected: format!("{} mask entries", masks.len()),
                    got: format!("{}", outputs.len()),
                });
            }
            // Pixel-level confusion over {background, foreground}.
            let mut conf = [0u64; 4];
            for (&o, &m) in outputs.data().iter().zip(masks.data()) {
                let pred = usize::from(o >= 0.5);
                let truth = usize::from(m >= 0.5);
                conf[truth * 2 + pred] += 1;
            }
            let iou = |class: usize| -> Option<f64> {
                let tp = conf[class * 2 + class];
                let fn_ = conf[class * 2 + (1 - class)];
                let fp = conf[(1 - class) * 2 + class];
                let union = tp + fn_ + fp;
                (union > 0).then(|| tp as f64 / union as f64)
            };
            let ious: Vec<f64> = (0..2).filter_map(iou).collect();
            let miou = if ious.is_empty() {
                // No pixels at all cannot happen for non-empty tensors; both
                // unions empty means trivially perfect.
                1.0
            } else {
                ious.iter().sum::<f64>() / ious.len() as f64
            };
            Ok(EvalReport {
                task: Task::Segmentation,
                metric: miou,
                accuracy: None,
                miou: Some(miou),
                confusion: conf.to_vec(),
                n_classes: 2,
                n_samples: masks.batch_size(),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_classification() {
        let outputs = Tensor::new(
            vec![3, 3],
            vec![5.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 5.0],
        )
        .unwrap();
        let report = evaluate(&outputs, &Targets::Classes(vec![0, 1, 2])).unwrap();
        assert_eq!(report.metric, 1.0);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(report.confusion[i * 3 + j], u64::from(i == j));
            }
        }
    }

    #[test]
    fn perfect_segmentation_has_miou_one() {
        let mask = Tensor::from_fn(&[1, 1, 4, 4], |i| f64::from(i % 3 == 0));
        let report = evaluate(&mask, &Targets::Masks(mask.clone())).unwrap();
        assert_eq!(report.metric, 1.0);
    }

    #[test]
    fn all_background_on_half_foreground_mask() {
        // Half the pixels foreground, prediction all background:
        // bg IoU = tn / (tn + fn) = 0.5, fg IoU = 0, mIoU = 0.25.
        let mask = Tensor::from_fn(&[1, 1, 2, 2], |i| f64::from(i < 2));
        let pred = Tensor::zeros(&[1, 1, 2, 2]);
        let report = evaluate(&pred, &Targets::Masks(mask)).unwrap();
        assert!((report.metric - 0.25).abs() < 1e-12);
    }

    #[test]
    fn metrics_are_permutation_invariant() {
        let outputs = Tensor::new(vec![4, 2], vec![1.0, 0.0, 0.0, 1.0, 0.8, 0.2, 0.1, 0.9]).unwrap();
        let labels = vec![0, 1, 1, 1];
        let a = evaluate(&outputs, &Targets::Classes(labels.clone())).unwrap();
        let perm = [3usize, 1, 0, 2];
        let outputs_p = outputs.gather(&perm);
        let labels_p: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let b = evaluate(&outputs_p, &Targets::Classes(labels_p)).unwrap();
        assert_eq!(a.metric, b.metric);
        assert_eq!(a.confusion, b.confusion);
    }

    #[test]
    fn metric_one_iff_exact_match() {
        let mask = Tensor::from_fn(&[1, 1, 3, 3], |i| f64::from(i % 2 == 0));
        let mut almost = mask.clone();
        almost.data_mut()[0] = 0.0;
        let report = evaluate(&almost, &Targets::Masks(mask)).unwrap();
        assert!(report.metric < 1.0);
    }
}
