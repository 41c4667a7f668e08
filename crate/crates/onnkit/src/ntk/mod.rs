//! Tangent-kernel computation and analysis.
//!
//! The empirical kernel of a network on a batch is the Gram matrix of its
//! per-sample parameter Jacobian rows. For wide reference networks the full
//! Jacobian does not fit in memory, so the Gram assembly switches to a
//! pairwise streaming mode that recomputes rows instead of storing them.

mod analytic;
mod perturb;
mod regress;
mod spectrum;

pub use analytic::{analytic_ntk_fc, linear_conv_ntk, LinearConvShape};
pub use perturb::{ntk_perturbation_experiment, PerturbationReport, WidthPerturbation};
pub use regress::{
    encode_targets, estimate_performance, ntk_regress, predict_classes, select_lambda,
    EstimateReport, ReferenceKernel, RegressionSetup, TargetEncoding, ValidationMetric,
};
pub use spectrum::{gram_spectrum, SpectrumReport};

use crate::error::{Error, Result};
use crate::net::{Network, NetworkSpec, ParamScope, Parameterization, Scalarization};
use crate::net::{build_network, LayerSpec};
use crate::tensor::Tensor;
use rayon::prelude::*;

/// Symmetric positive semi-definite batch kernel matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct NtkMatrix {
    n: usize,
    values: Vec<f64>,
}

impl NtkMatrix {
    pub fn new(n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * n {
            return Err(Error::ShapeMismatch {
                location: "NtkMatrix::new".into(),
                expected: format!("{} entries", n * n),
                got: format!("{}", values.len()),
            });
        }
        Ok(Self { n, values })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, c: f64) -> NtkMatrix {
        NtkMatrix {
            n: self.n,
            values: self.values.iter().map(|v| v * c).collect(),
        }
    }

    /// Frobenius norm of the difference.
    pub fn distance(&self, other: &NtkMatrix) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Checks symmetry (1e-9 relative) and positive semi-definiteness
    /// (eigenvalues >= -1e-8 * trace / n).
    pub fn validate(&self) -> Result<()> {
        let scale = self.values.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                let d = (self.get(i, j) - self.get(j, i)).abs();
                if d > 1e-9 * scale {
                    return Err(Error::Numerical(format!(
                        "kernel asymmetric at ({i},{j}): {d:.3e} vs scale {scale:.3e}"
                    )));
                }
            }
        }
        let floor = -1e-8 * self.trace() / self.n as f64;
        let min = self.min_eigenvalue();
        if min < floor {
            return Err(Error::Numerical(format!(
                "kernel not PSD: smallest eigenvalue {min:.6e} below {floor:.6e}"
            )));
        }
        Ok(())
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let m = nalgebra::DMatrix::from_row_slice(self.n, self.n, &self.values);
        let eig = m.symmetric_eigen();
        eig.eigenvalues.iter().fold(f64::INFINITY, |a, &v| a.min(v))
    }
}

/// Gram matrix of Jacobian rows: `theta = J J^T`, symmetric by construction.
pub fn empirical_ntk(j: &Tensor) -> Result<NtkMatrix> {
    let &[n, p] = j.shape() else {
        return Err(Error::ShapeMismatch {
            location: "empirical_ntk".into(),
            expected: "n x p Jacobian".into(),
            got: format!("{:?}", j.shape()),
        });
    };
    let d = j.data();
    let mut values = vec![0.0; n * n];
    // Upper triangle in parallel over rows, then mirror.
    values
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(i, row)| {
            let ji = &d[i * p..(i + 1) * p];
            for l in i..n {
                let jl = &d[l * p..(l + 1) * p];
                let mut acc = 0.0;
                for (a, b) in ji.iter().zip(jl) {
                    acc += a * b;
                }
                row[l] = acc;
            }
        });
    for i in 0..n {
        for l in 0..i {
            values[i * n + l] = values[l * n + i];
        }
    }
    NtkMatrix::new(n, values)
}

/// Above this many Jacobian entries the Gram assembly recomputes rows
/// pairwise instead of materializing the full Jacobian (~128 MB of f64).
const STREAMING_THRESHOLD: usize = 16_000_000;

/// Empirical kernel of a network on a batch, choosing between the stored
/// and streaming strategies by memory footprint.
pub fn empirical_ntk_of_network(
    net: &Network,
    batch: &Tensor,
    scalarization: Scalarization,
) -> Result<NtkMatrix> {
    let n = batch.batch_size();
    let p = net.param_count();
    if n * p <= STREAMING_THRESHOLD {
        let j = net.per_sample_jacobian(batch, scalarization, &ParamScope::All)?;
        return empirical_ntk(&j);
    }
    let row_of = |i: usize| -> Result<Vec<f64>> {
        let sample = batch.sample_tensor(i);
        let j = net.per_sample_jacobian(&sample, scalarization, &ParamScope::All)?;
        Ok(j.into_data())
    };
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        let ji = row_of(i)?;
        for l in i..n {
            let jl = if l == i { ji.clone() } else { row_of(l)? };
            let mut acc = 0.0;
            for (a, b) in ji.iter().zip(&jl) {
                acc += a * b;
            }
            values[i * n + l] = acc;
            values[l * n + i] = acc;
        }
    }
    NtkMatrix::new(n, values)
}

/// Widens every hidden layer of `spec` by `width_scale` and switches it to
/// the ntk parameterization with biases removed, producing the finite-width
/// reference architecture for Monte Carlo kernel estimates.
pub fn scale_spec_widths(spec: &NetworkSpec, width_scale: usize) -> Result<NetworkSpec> {
    if width_scale == 0 {
        return Err(Error::InvalidSpec("width_scale must be >= 1".into()));
    }
    let last_param = spec
        .layers
        .iter()
        .rposition(|l| l.has_params())
        .ok_or_else(|| Error::InvalidSpec("spec has no parameterized layers".into()))?;
    let mut prev_scaled = false;
    let mut layers = Vec::with_capacity(spec.layers.len());
    for (i, layer) in spec.layers.iter().enumerate() {
        let scale_out = i != last_param;
        let l = match *layer {
            LayerSpec::Dense { fan_in, fan_out, .. } => {
                let new = LayerSpec::Dense {
                    fan_in: if prev_scaled { fan_in * width_scale } else { fan_in },
                    fan_out: if scale_out { fan_out * width_scale } else { fan_out },
                    bias: false,
                };
                prev_scaled = scale_out;
                new
            }
            LayerSpec::Conv2d {
                channels_in,
                channels_out,
                kernel_size,
                padding,
                ..
            } => {
                let new = LayerSpec::Conv2d {
                    channels_in: if prev_scaled { channels_in * width_scale } else { channels_in },
                    channels_out: if scale_out { channels_out * width_scale } else { channels_out },
                    kernel_size,
                    padding,
                    bias: false,
                };
                prev_scaled = scale_out;
                new
            }
            ref other => other.clone(),
        };
        layers.push(l);
    }
    Ok(NetworkSpec::new(layers, Parameterization::Ntk, spec.frontend_split))
}

/// Average empirical kernel over `n_seeds` random ntk-parameterized
/// initializations of the width-scaled architecture. Seeds are derived
/// deterministically and averaged in fixed order.
pub fn monte_carlo_ntk(
    spec: &NetworkSpec,
    batch: &Tensor,
    width_scale: usize,
    n_seeds: usize,
    seed: u64,
) -> Result<NtkMatrix> {
    if n_seeds == 0 {
        return Err(Error::InvalidSpec("monte_carlo_ntk needs n_seeds >= 1".into()));
    }
    let scaled = scale_spec_widths(spec, width_scale)?;
    let n = batch.batch_size();
    let mut acc = vec![0.0; n * n];
    for s in 0..n_seeds {
        let net = build_network(&scaled, crate::rng::derive(seed, &format!("mc-ntk-{s}")))?;
        let theta = empirical_ntk_of_network(&net, batch, Scalarization::SumOutputs)?;
        for (a, v) in acc.iter_mut().zip(theta.values()) {
            *a += v;
        }
    }
    let inv = 1.0 / n_seeds as f64;
    for a in &mut acc {
        *a *= inv;
    }
    NtkMatrix::new(n, acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_jacobian_gives_identity_kernel() {
        let n = 4;
        let j = Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 });
        let theta = empirical_ntk(&j).unwrap();
        for i in 0..n {
            for l in 0..n {
                assert_eq!(theta.get(i, l), if i == l { 1.0 } else { 0.0 });
            }
        }
        theta.validate().unwrap();
    }

    #[test]
    fn duplicate_rows_duplicate_kernel_rows() {
        let j = Tensor::new(vec![3, 2], vec![1.0, 2.0, 1.0, 2.0, 0.5, -1.0]).unwrap();
        let theta = empirical_ntk(&j).unwrap();
        for l in 0..3 {
            assert_eq!(theta.get(0, l), theta.get(1, l));
            assert_eq!(theta.get(l, 0), theta.get(l, 1));
        }
        // Rank deficient: smallest eigenvalue ~ 0.
        assert!(theta.min_eigenvalue().abs() < 1e-12 * theta.trace());
    }

    #[test]
    fn streaming_matches_stored_gram() {
        use crate::net::{LayerSpec, NetworkSpec};
        let spec = NetworkSpec::new(
            vec![
                LayerSpec::dense_no_bias(6, 12),
                LayerSpec::Relu,
                LayerSpec::dense_no_bias(12, 2),
            ],
            Parameterization::Ntk,
            0,
        );
        let net = build_network(&spec, 3).unwrap();
        let x = Tensor::from_fn(&[5, 6], |i| ((i * 37 % 11) as f64 - 5.0) / 5.0);
        let stored = empirical_ntk_of_network(&net, &x, Scalarization::SumOutputs).unwrap();
        // Force the pairwise path by computing through rows manually.
        let j = net
            .per_sample_jacobian(&x, Scalarization::SumOutputs, &ParamScope::All)
            .unwrap();
        let direct = empirical_ntk(&j).unwrap();
        assert!(stored.distance(&direct) < 1e-12);
    }

    #[test]
    fn width_scaling_keeps_io_dims() {
        use crate::net::{LayerSpec, NetworkSpec};
        let spec = NetworkSpec::new(
            vec![
                LayerSpec::dense(8, 4),
                LayerSpec::Relu,
                LayerSpec::dense(4, 4),
                LayerSpec::Relu,
                LayerSpec::dense(4, 2),
            ],
            Parameterization::Standard,
            0,
        );
        let scaled = scale_spec_widths(&spec, 16).unwrap();
        match (&scaled.layers[0], &scaled.layers[2], &scaled.layers[4]) {
            (
                LayerSpec::Dense { fan_in: 8, fan_out: 64, bias: false },
                LayerSpec::Dense { fan_in: 64, fan_out: 64, bias: false },
                LayerSpec::Dense { fan_in: 64, fan_out: 2, bias: false },
            ) => {}
            other => panic!("unexpected scaled spec: {other:?}"),
        }
        assert_eq!(scaled.parameterization, Parameterization::Ntk);
    }

    #[test]
    fn monte_carlo_single_seed_equals_empirical() {
        use crate::net::{LayerSpec, NetworkSpec};
        let spec = NetworkSpec::new(
            vec![LayerSpec::dense_no_bias(4, 6), LayerSpec::Relu, LayerSpec::dense_no_bias(6, 1)],
            Parameterization::Ntk,
            0,
        );
        let x = Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.3).cos());
        let mc = monte_carlo_ntk(&spec, &x, 1, 1, 5).unwrap();
        let scaled = scale_spec_widths(&spec, 1).unwrap();
        let net = build_network(&scaled, crate::rng::derive(5, "mc-ntk-0")).unwrap();
        let emp = empirical_ntk_of_network(&net, &x, Scalarization::SumOutputs).unwrap();
        assert!(mc.distance(&emp) == 0.0);
    }
}
