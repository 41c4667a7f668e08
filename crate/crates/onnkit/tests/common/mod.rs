//! Shared independent oracles for the integration suites.
//!
//! Everything here recomputes quantities by a route the library itself does
//! not use (finite differences, scalar loops), so agreement is evidence and
//! not tautology.

#![allow(dead_code)]

use onnkit::net::{Network, ParamScope, Scalarization};
use onnkit::tensor::Tensor;

/// Central finite differences of `eval` with respect to every parameter in
/// `scope`, leaving the network as it was found.
pub fn fd_grad_scoped(
    net: &mut Network,
    scope: &ParamScope,
    h: f64,
    mut eval: impl FnMut(&Network) -> f64,
) -> Vec<f64> {
    let idx = net.scoped_param_indices(scope);
    let mut out = Vec::with_capacity(net.scoped_dim(scope));
    for pi in idx {
        for j in 0..net.params()[pi].len() {
            let orig = net.params()[pi].data()[j];
            net.params_mut()[pi].data_mut()[j] = orig + h;
            let up = eval(net);
            net.params_mut()[pi].data_mut()[j] = orig - h;
            let down = eval(net);
            net.params_mut()[pi].data_mut()[j] = orig;
            out.push((up - down) / (2.0 * h));
        }
    }
    out
}

pub fn fd_grad(net: &mut Network, h: f64, eval: impl FnMut(&Network) -> f64) -> Vec<f64> {
    fd_grad_scoped(net, &ParamScope::All, h, eval)
}

/// Asserts elementwise relative agreement with an absolute floor for
/// entries near zero (finite-difference noise).
pub fn assert_close_rel(got: &[f64], want: &[f64], rel_tol: f64, abs_floor: f64, what: &str) {
    assert_eq!(got.len(), want.len(), "{what}: length mismatch");
    for (i, (&a, &b)) in got.iter().zip(want).enumerate() {
        let diff = (a - b).abs();
        let scale = a.abs().max(b.abs());
        assert!(
            diff <= rel_tol * scale || diff <= abs_floor,
            "{what}: entry {i} differs: got {a}, want {b} (diff {diff}, scale {scale})"
        );
    }
}

/// Scalarized output of the network on one sample, summed or averaged over
/// output units.
pub fn scalarized_output(net: &Network, sample: &Tensor, scalarization: Scalarization) -> f64 {
    let out = net.forward(sample).unwrap();
    let s: f64 = out.data().iter().sum();
    match scalarization {
        Scalarization::SumOutputs => s,
        Scalarization::MeanOutputs => s / out.len() as f64,
        Scalarization::PerOutput => panic!("scalarized_output needs a scalarization"),
    }
}

/// Quadruple-loop valid 2-D convolution over a multi-channel image, the
/// brute-force reference for everything conv-shaped. Kernels are
/// `[co, ci, k, k]`, image `[ci, h, w]`.
pub fn conv_valid_oracle(image: &[f64], ci: usize, h: usize, w: usize, kernels: &[f64], co: usize, k: usize) -> Vec<f64> {
    let oh = h - k + 1;
    let ow = w - k + 1;
    let mut out = vec![0.0; co * oh * ow];
    for c_out in 0..co {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for c_in in 0..ci {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iv = image[c_in * h * w + (oy + ky) * w + (ox + kx)];
                            let kv = kernels[((c_out * ci + c_in) * k + ky) * k + kx];
                            acc += iv * kv;
                        }
                    }
                }
                out[(c_out * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

/// Entry-by-entry Gram matrix of the rows of `j` (n x p), scalar loop.
pub fn gram_oracle(j: &Tensor) -> Vec<f64> {
    let n = j.shape()[0];
    let p = j.shape()[1];
    let d = j.data();
    let mut out = vec![0.0; n * n];
    for a in 0..n {
        for b in 0..n {
            let mut acc = 0.0;
            for c in 0..p {
                acc += d[a * p + c] * d[b * p + c];
            }
            out[a * n + b] = acc;
        }
    }
    out
}
