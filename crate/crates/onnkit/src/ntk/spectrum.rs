//! Parameter-Gram spectrum analysis: how many parameter directions carry
//! the cumulative eigenvalue power of g = J^T J.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpectrumReport {
    /// Descending, non-negative, zero-padded to the parameter count.
    pub eigenvalues: Vec<f64>,
    /// Normalized partial sums; non-decreasing, ends at 1.
    pub cumulative_power: Vec<f64>,
    /// Smallest counts reaching the standard thresholds.
    pub counts_at: Vec<(f64, usize)>,
}

impl SpectrumReport {
    /// Smallest number of leading eigenvalues whose cumulative power reaches
    /// `threshold`.
    pub fn count_at(&self, threshold: f64) -> usize {
        self.cumulative_power
            .iter()
            .position(|&c| c >= threshold)
            .map(|i| i + 1)
            .unwrap_or(self.cumulative_power.len())
    }
}

const STANDARD_THRESHOLDS: [f64; 3] = [0.90, 0.95, 0.99];

/// Eigenvalue spectrum of the parameter Gram J^T J (p x p). When p > n the
/// non-zero spectrum equals that of J J^T, so the n x n dual is decomposed
/// and zero-padded to length p.
pub fn gram_spectrum(j: &Tensor) -> Result<SpectrumReport> {
    let &[n, p] = j.shape() else {
        return Err(Error::ShapeMismatch {
            location: "gram_spectrum".into(),
            expected: "n x p Jacobian".into(),
            got: format!("{:?}", j.shape()),
        });
    };
    let d = j.data();
    let side = n.min(p);
    let mut gram = vec![0.0; side * side];
    if p > n {
        // Dual: J J^T.
        for a in 0..n {
            for b in a..n {
                let mut acc = 0.0;
                for c in 0..p {
                    acc += d[a * p + c] * d[b * p + c];
                }
                gram[a * n + b] = acc;
                gram[b * n + a] = acc;
            }
        }
    } else {
        for a in 0..p {
            for b in a..p {
                let mut acc = 0.0;
                for r in 0..n {
                    acc += d[r * p + a] * d[r * p + b];
                }
                gram[a * p + b] = acc;
                gram[b * p + a] = acc;
            }
        }
    }
    let m = DMatrix::from_row_slice(side, side, &gram);
    let eig = m.symmetric_eigen();
    let mut eigenvalues: Vec<f64> = eig.eigenvalues.iter().map(|&v| v.max(0.0)).collect();
    eigenvalues.sort_by(|a, b| b.partial_cmp(a).unwrap());
    eigenvalues.resize(p, 0.0);

    let total: f64 = eigenvalues.iter().sum();
    let mut cumulative_power = Vec::with_capacity(p);
    if total <= 0.0 {
        // Zero Jacobian: all the (zero) power is reached immediately.
        cumulative_power = vec![1.0; p];
    } else {
        let mut acc = 0.0;
        for &v in &eigenvalues {
            acc += v;
            cumulative_power.push((acc / total).min(1.0));
        }
        *cumulative_power.last_mut().unwrap() = 1.0;
    }
    let mut report = SpectrumReport {
        eigenvalues,
        cumulative_power,
        counts_at: Vec::new(),
    };
    report.counts_at = STANDARD_THRESHOLDS
        .iter()
        .map(|&t| (t, report.count_at(t)))
        .collect();
    Ok(report)
}
