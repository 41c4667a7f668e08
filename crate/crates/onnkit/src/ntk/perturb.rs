//! Kernel perturbation scaling: how much the empirical tangent kernel of a
//! one-hidden-layer network moves when its first-layer weights are nudged
//! by a fixed-norm perturbation, as a function of width.

use super::{empirical_ntk_of_network, NtkMatrix};
use crate::error::{Error, Result};
use crate::net::{build_network, LayerSpec, NetworkSpec, ParamScope, Parameterization, Scalarization};
use crate::rng::{derive, rng_from_seed};
use crate::tensor::Tensor;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WidthPerturbation {
    pub width: usize,
    pub mean_delta_theta: f64,
    pub std_delta_theta: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PerturbationReport {
    pub per_width: Vec<WidthPerturbation>,
    /// Least-squares slope of log mean-perturbation versus log width.
    pub slope: f64,
    pub delta_norm: f64,
}

const PROBE_BATCH: usize = 8;
const PROBE_DIM: usize = 16;

fn probe_batch(seed: u64) -> Tensor {
    let mut rng = rng_from_seed(derive(seed, "perturb-probe"));
    Tensor::from_fn(&[PROBE_BATCH, PROBE_DIM], |_| rng.sample(StandardNormal))
}

fn one_hidden_spec(width: usize) -> NetworkSpec {
    NetworkSpec::new(
        vec![
            LayerSpec::dense_no_bias(PROBE_DIM, width),
            LayerSpec::Relu,
            LayerSpec::dense_no_bias(width, 1),
        ],
        Parameterization::Ntk,
        0,
    )
}

/// Measures mean ||Theta_perturbed - Theta||_F over `n_trials` random
/// networks and perturbation directions per width, then fits the log-log
/// slope. First-layer weights only are perturbed, scaled to exactly
/// `delta_norm` in Frobenius norm. `delta_norm = 0` yields exactly zero.
pub fn ntk_perturbation_experiment(
    widths: &[usize],
    delta_norm: f64,
    n_trials: usize,
    seed: u64,
) -> Result<PerturbationReport> {
    if widths.len() < 2 {
        return Err(Error::InvalidSpec("need at least two widths".into()));
    }
    if n_trials == 0 {
        return Err(Error::InvalidSpec("need n_trials >= 1".into()));
    }
    let x = probe_batch(seed);
    let mut per_width = Vec::with_capacity(widths.len());
    for &m in widths {
        let spec = one_hidden_spec(m);
        let mut deltas = Vec::with_capacity(n_trials);
        for t in 0..n_trials {
            let trial_seed = derive(seed, &format!("perturb-w{m}-t{t}"));
            let net = build_network(&spec, trial_seed)?;
            let theta = empirical_ntk_of_network(&net, &x, Scalarization::SumOutputs)?;
            let perturbed = perturb_first_layer(&net, delta_norm, derive(trial_seed, "dir"))?;
            let theta_p = empirical_ntk_of_network(&perturbed, &x, Scalarization::SumOutputs)?;
            deltas.push(frobenius_distance(&theta, &theta_p));
        }
        let mean = deltas.iter().sum::<f64>() / n_trials as f64;
        let var = deltas.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>()
            / n_trials.max(2).saturating_sub(1) as f64;
        per_width.push(WidthPerturbation {
            width: m,
            mean_delta_theta: mean,
            std_delta_theta: var.sqrt(),
        });
    }
    let slope = if delta_norm == 0.0 {
        0.0
    } else {
        log_log_slope(
            &per_width
                .iter()
                .map(|w| (w.width as f64, w.mean_delta_theta))
                .collect::<Vec<_>>(),
        )
    };
    Ok(PerturbationReport {
        per_width,
        slope,
        delta_norm,
    })
}

fn perturb_first_layer(net: &crate::net::Network, delta_norm: f64, seed: u64) -> Result<crate::net::Network> {
    let mut out = net.clone();
    if delta_norm == 0.0 {
        return Ok(out);
    }
    let first_w = net
        .scoped_param_indices(&ParamScope::Layers(vec![0]))
        .into_iter()
        .next()
        .ok_or_else(|| Error::InvalidSpec("network has no first-layer weights".into()))?;
    let mut rng = rng_from_seed(seed);
    let len = net.params()[first_w].len();
    let mut dir: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = delta_norm / norm;
    for d in &mut dir {
        *d *= scale;
    }
    for (p, d) in out.params_mut()[first_w].data_mut().iter_mut().zip(&dir) {
        *p += d;
    }
    Ok(out)
}

fn frobenius_distance(a: &NtkMatrix, b: &NtkMatrix) -> f64 {
    a.distance(b)
}

fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(_, y)| *y > 0.0)
        .map(|&(x, y)| (x.ln(), y.ln()))
        .collect();
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}
