//! Kernel ridge regression on tangent kernels: pre-training performance
//! estimation and its lambda selection.

use super::{analytic_ntk_fc, linear_conv_ntk, monte_carlo_ntk, LinearConvShape, NtkMatrix};
use crate::error::{Error, Result};
use crate::net::{LayerSpec, NetworkSpec};
use crate::tensor::Tensor;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetEncoding {
    /// One-hot minus 1/K; the standard choice for NTK classification.
    CenteredOneHot,
    OneHot,
    Raw,
}

#[derive(Clone, Debug)]
pub struct RegressionSetup {
    pub lambda: f64,
    /// Relative grid; each entry is multiplied by trace(K)/n at use, making
    /// selection scale-free.
    pub lambda_grid: Vec<f64>,
    pub target_encoding: TargetEncoding,
}

impl Default for RegressionSetup {
    fn default() -> Self {
        Self {
            lambda: 1e-6,
            lambda_grid: vec![1e-6, 1e-4, 1e-2, 1.0, 1e2],
            target_encoding: TargetEncoding::CenteredOneHot,
        }
    }
}

/// Encodes class labels as an `n x k` target matrix.
pub fn encode_targets(labels: &[usize], k: usize, encoding: TargetEncoding) -> Tensor {
    let n = labels.len();
    let offset = match encoding {
        TargetEncoding::CenteredOneHot => 1.0 / k as f64,
        _ => 0.0,
    };
    Tensor::from_fn(&[n, k], |i| {
        let (row, col) = (i / k, i % k);
        let hot = if labels[row] == col { 1.0 } else { 0.0 };
        hot - offset
    })
}

/// Ridge solve: predictions = K_st (K_tt + lambda I)^-1 Y.
///
/// `k_st` is the rectangular test-train kernel block (`n_test x n_train`),
/// `y_train` is `n_train x k`. Fails with the smallest eigenvalue when the
/// regularized kernel is not positive definite.
pub fn ntk_regress(
    k_tt: &NtkMatrix,
    k_st: &Tensor,
    y_train: &Tensor,
    lambda: f64,
) -> Result<Tensor> {
    let n = k_tt.n();
    let &[n_test, n_train] = k_st.shape() else {
        return Err(Error::ShapeMismatch {
            location: "ntk_regress".into(),
            expected: "n_test x n_train kernel block".into(),
            got: format!("{:?}", k_st.shape()),
        });
    };
    if n_train != n || y_train.shape()[0] != n {
        return Err(Error::ShapeMismatch {
            location: "ntk_regress".into(),
            expected: format!("train kernel {n} x {n} and matching targets"),
            got: format!("k_st {:?}, y {:?}", k_st.shape(), y_train.shape()),
        });
    }
    if lambda < 0.0 {
        return Err(Error::InvalidSpec("lambda must be non-negative".into()));
    }
    let k_out = y_train.shape()[1];
    let mut reg = DMatrix::from_row_slice(n, n, k_tt.values());
    for i in 0..n {
        reg[(i, i)] += lambda;
    }
    let chol = reg.cholesky().ok_or_else(|| {
        Error::Numerical(format!(
            "kernel solve failed: K + lambda I not positive definite (lambda {lambda:.3e}, smallest eigenvalue {:.6e})",
            k_tt.min_eigenvalue() + lambda
        ))
    })?;
    let y = DMatrix::from_row_slice(n, k_out, y_train.data());
    let alpha = chol.solve(&y);
    let kst = DMatrix::from_row_slice(n_test, n_train, k_st.data());
    let preds = kst * alpha;
    let mut data = Vec::with_capacity(n_test * k_out);
    for i in 0..n_test {
        for j in 0..k_out {
            data.push(preds[(i, j)]);
        }
    }
    Tensor::new(vec![n_test, k_out], data)
}

/// Argmax per row; ties break toward the lowest class index.
pub fn predict_classes(preds: &Tensor) -> Vec<usize> {
    let k = preds.shape()[1];
    preds
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ValidationMetric {
    Accuracy,
    Mse,
}

/// Grid search for the ridge regularizer on a validation split of the
/// training kernel. Grid entries are scaled by trace(K_fit)/n_fit; ties
/// resolve to the smallest lambda.
pub fn select_lambda(
    k_tt: &NtkMatrix,
    y_train: &Tensor,
    labels: Option<&[usize]>,
    setup: &RegressionSetup,
    validation_fraction: f64,
    metric: ValidationMetric,
) -> Result<(f64, f64)> {
    if setup.lambda_grid.is_empty() {
        return Err(Error::InvalidSpec("lambda grid must be non-empty".into()));
    }
    if !(0.0 < validation_fraction && validation_fraction < 1.0) {
        return Err(Error::InvalidSpec(format!(
            "validation_fraction must be in (0, 1), got {validation_fraction}"
        )));
    }
    let n = k_tt.n();
    let n_val = ((n as f64 * validation_fraction).round() as usize).clamp(1, n - 1);
    let n_fit = n - n_val;

    // Contiguous split: callers shuffle at the dataset level.
    let mut k_fit = vec![0.0; n_fit * n_fit];
    for i in 0..n_fit {
        for j in 0..n_fit {
            k_fit[i * n_fit + j] = k_tt.get(i, j);
        }
    }
    let k_fit = NtkMatrix::new(n_fit, k_fit)?;
    let k_vf = Tensor::from_fn(&[n_val, n_fit], |i| {
        let (r, c) = (i / n_fit, i % n_fit);
        k_tt.get(n_fit + r, c)
    });
    let k_out = y_train.shape()[1];
    let y_fit = Tensor::from_fn(&[n_fit, k_out], |i| y_train.data()[i]);

    let scale = k_fit.trace() / n_fit as f64;
    let mut grid: Vec<f64> = setup.lambda_grid.clone();
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut best: Option<(f64, f64)> = None; // (lambda, score to maximize)
    for rel in grid {
        let lambda = rel * scale;
        let preds = ntk_regress(&k_fit, &k_vf, &y_fit, lambda)?;
        let score = match metric {
            ValidationMetric::Accuracy => {
                let labels = labels.ok_or_else(|| {
                    Error::InvalidSpec("accuracy selection needs class labels".into())
                })?;
                let pred = predict_classes(&preds);
                let correct = pred
                    .iter()
                    .zip(&labels[n_fit..])
                    .filter(|(a, b)| a == b)
                    .count();
                correct as f64 / n_val as f64
            }
            ValidationMetric::Mse => {
                let mut sse = 0.0;
                for (i, &p) in preds.data().iter().enumerate() {
                    let t = y_train.data()[n_fit * k_out + i];
                    sse += (p - t) * (p - t);
                }
                -(sse / preds.len() as f64)
            }
        };
        // Strictly-greater keeps the smallest lambda on ties (grid ascending).
        if best.map_or(true, |(_, s)| score > s) {
            best = Some((lambda, score));
        }
    }
    let (lambda, score) = best.unwrap();
    let val_metric = match metric {
        ValidationMetric::Accuracy => score,
        ValidationMetric::Mse => -score,
    };
    Ok((lambda, val_metric))
}

/// Which infinite/finite-width reference produces the kernel.
#[derive(Clone, Debug)]
pub enum ReferenceKernel {
    /// Analytic FC kernel with this many hidden ReLU layers.
    AnalyticFc { depth: usize },
    /// Closed-form limit of the linear conv + dense student.
    LinearConv(LinearConvShape),
    /// Finite-width Monte Carlo average for architectures without a closed
    /// form (desk sizes only; cost grows with n^2 p).
    MonteCarlo {
        spec: NetworkSpec,
        width_scale: usize,
        n_seeds: usize,
        seed: u64,
    },
}

impl ReferenceKernel {
    /// Picks the reference route for an architecture: analytic when the spec
    /// is dense/relu-only, the closed form for the linear conv student, and
    /// Monte Carlo otherwise.
    pub fn for_spec(spec: &NetworkSpec, width_scale: usize, n_seeds: usize, seed: u64) -> Self {
        if spec.is_fc_only() {
            let depth = spec
                .layers
                .iter()
                .filter(|l| matches!(l, LayerSpec::Relu))
                .count()
                .max(1);
            return ReferenceKernel::AnalyticFc { depth };
        }
        let param_layers: Vec<&LayerSpec> = spec.layers.iter().filter(|l| l.has_params()).collect();
        let no_relu = !spec.layers.iter().any(|l| matches!(l, LayerSpec::Relu));
        if no_relu && param_layers.len() == 2 {
            if let (
                LayerSpec::Conv2d {
                    kernel_size,
                    padding: crate::net::Padding::Valid,
                    ..
                },
                LayerSpec::Dense { fan_out, .. },
            ) = (param_layers[0], param_layers[1])
            {
                return ReferenceKernel::LinearConv(LinearConvShape {
                    kernel_px: *kernel_size,
                    n_outputs: *fan_out,
                });
            }
        }
        ReferenceKernel::MonteCarlo {
            spec: spec.clone(),
            width_scale,
            n_seeds,
            seed,
        }
    }

    /// Kernel over all rows of `x` (train followed by test).
    pub fn kernel(&self, x: &Tensor) -> Result<NtkMatrix> {
        match self {
            ReferenceKernel::AnalyticFc { depth } => {
                let flat = flatten_samples(x);
                analytic_ntk_fc(&flat, *depth)
            }
            ReferenceKernel::LinearConv(shape) => linear_conv_ntk(x, *shape),
            ReferenceKernel::MonteCarlo {
                spec,
                width_scale,
                n_seeds,
                seed,
            } => monte_carlo_ntk(spec, x, *width_scale, *n_seeds, *seed),
        }
    }
}

fn flatten_samples(x: &Tensor) -> Tensor {
    let n = x.batch_size();
    let d = x.sample_len();
    Tensor::new(vec![n, d], x.data().to_vec()).unwrap()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EstimateReport {
    pub lambda_star: f64,
    pub val_metric: f64,
    pub test_metric: f64,
}

/// Pre-training performance estimate: builds the reference kernel, selects
/// lambda on a validation split, and reports test accuracy of the kernel
/// regression.
pub fn estimate_performance(
    reference: &ReferenceKernel,
    train_x: &Tensor,
    train_labels: &[usize],
    test_x: &Tensor,
    test_labels: &[usize],
    n_classes: usize,
    setup: &RegressionSetup,
    validation_fraction: f64,
) -> Result<EstimateReport> {
    let n_train = train_x.batch_size();
    let n_test = test_x.batch_size();
    let mut all = Vec::with_capacity((n_train + n_test) * train_x.sample_len());
    all.extend_from_slice(train_x.data());
    all.extend_from_slice(test_x.data());
    let mut shape = train_x.shape().to_vec();
    shape[0] = n_train + n_test;
    let x_all = Tensor::new(shape, all)?;
    let k_all = reference.kernel(&x_all)?;

    let k_tt = {
        let mut v = vec![0.0; n_train * n_train];
        for i in 0..n_train {
            for j in 0..n_train {
                v[i * n_train + j] = k_all.get(i, j);
            }
        }
        NtkMatrix::new(n_train, v)?
    };
    let k_st = Tensor::from_fn(&[n_test, n_train], |i| {
        let (r, c) = (i / n_train, i % n_train);
        k_all.get(n_train + r, c)
    });

    let y_train = encode_targets(train_labels, n_classes, setup.target_encoding);
    let (lambda_star, val_metric) = select_lambda(
        &k_tt,
        &y_train,
        Some(train_labels),
        setup,
        validation_fraction,
        ValidationMetric::Accuracy,
    )?;
    let preds = ntk_regress(&k_tt, &k_st, &y_train, lambda_star)?;
    let pred_classes = predict_classes(&preds);
    let correct = pred_classes
        .iter()
        .zip(test_labels)
        .filter(|(a, b)| a == b)
        .count();
    Ok(EstimateReport {
        lambda_star,
        val_metric,
        test_metric: correct as f64 / n_test as f64,
    })
}
