//! Closed-form reference kernels.
//!
//! `analytic_ntk_fc` is the infinite-width limit of a fully connected ReLU
//! stack with L hidden layers and a linear readout, built from the ReLU
//! arc-cosine recursion. The layer-index convention is pinned empirically:
//! the wide-network convergence test checks finite ntk-parameterized
//! networks approach these values as width grows.
//!
//! `linear_conv_ntk` is the infinite-kernel limit of the purely linear
//! [conv -> flatten -> dense] student used in the random-frontend ablation.
//! Because that network has no nonlinearity, its limit kernel collapses to
//! a position-weighted dot product over aligned pixels.

use super::NtkMatrix;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::f64::consts::PI;

/// Infinite-width NTK of a ReLU network with `depth` hidden layers on the
/// rows of `x` (`n x d`). Rows must be non-zero.
pub fn analytic_ntk_fc(x: &Tensor, depth: usize) -> Result<NtkMatrix> {
    let &[n, d] = x.shape() else {
        return Err(Error::ShapeMismatch {
            location: "analytic_ntk_fc".into(),
            expected: "n x d inputs".into(),
            got: format!("{:?}", x.shape()),
        });
    };
    if depth == 0 {
        return Err(Error::InvalidSpec("analytic_ntk_fc needs depth >= 1".into()));
    }
    let data = x.data();
    // Sigma^0 = X X^T / d
    let mut sigma = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let mut acc = 0.0;
            for c in 0..d {
                acc += data[i * d + c] * data[j * d + c];
            }
            let v = acc / d as f64;
            sigma[i * n + j] = v;
            sigma[j * n + i] = v;
        }
    }
    for i in 0..n {
        if sigma[i * n + i] <= 0.0 {
            return Err(Error::InvalidSpec(format!(
                "input row {i} has zero norm; the arc-cosine recursion is undefined"
            )));
        }
    }
    let mut theta = sigma.clone();
    for _ in 0..depth {
        let mut next_sigma = vec![0.0; n * n];
        let mut next_theta = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let sii = sigma[i * n + i];
                let sjj = sigma[j * n + j];
                let root = (sii * sjj).sqrt();
                let lambda = (sigma[i * n + j] / root).clamp(-1.0, 1.0);
                let angle = lambda.acos();
                let s_next = root / PI * (angle.sin() + (PI - angle) * lambda);
                let sdot = (PI - angle) / PI;
                let t_next = s_next + theta[i * n + j] * sdot;
                next_sigma[i * n + j] = s_next;
                next_sigma[j * n + i] = s_next;
                next_theta[i * n + j] = t_next;
                next_theta[j * n + i] = t_next;
            }
        }
        sigma = next_sigma;
        theta = next_theta;
    }
    NtkMatrix::new(n, theta)
}

/// Shape of the linear single-conv student whose infinite-kernel limit is
/// computed in closed form.
#[derive(Clone, Copy, Debug)]
pub struct LinearConvShape {
    pub kernel_px: usize,
    /// Output units of the dense readout.
    pub n_outputs: usize,
}

/// Infinite-kernel-count NTK of [conv(k, valid, no bias) -> flatten ->
/// dense(no bias)] with no nonlinearity, on `x` shaped `n x c x h x w`.
///
/// For this linear network both parameter blocks contribute the same
/// aligned-pixel correlation, weighted by how many conv windows cover each
/// position: K(x, x') = 2 K_out / (P c k^2) * sum_q cover(q) x_q x'_q
/// with P the number of output positions.
pub fn linear_conv_ntk(x: &Tensor, shape: LinearConvShape) -> Result<NtkMatrix> {
    let &[n, c, h, w] = x.shape() else {
        return Err(Error::ShapeMismatch {
            location: "linear_conv_ntk".into(),
            expected: "n x c x h x w inputs".into(),
            got: format!("{:?}", x.shape()),
        });
    };
    let k = shape.kernel_px;
    if h < k || w < k {
        return Err(Error::InvalidSpec(format!(
            "image {h}x{w} smaller than kernel {k}"
        )));
    }
    let (oh, ow) = (h - k + 1, w - k + 1);
    let cover_1d = |len: usize, out_len: usize| -> Vec<f64> {
        (0..len)
            .map(|y| {
                let lo = y.saturating_sub(k - 1).min(out_len - 1);
                let hi = y.min(out_len - 1);
                (hi - lo + 1) as f64
            })
            .collect()
    };
    let cy = cover_1d(h, oh);
    let cx = cover_1d(w, ow);
    let mut weights = vec![0.0; h * w];
    for y in 0..h {
        for xw in 0..w {
            weights[y * w + xw] = cy[y] * cx[xw];
        }
    }
    let factor = 2.0 * shape.n_outputs as f64 / ((oh * ow) as f64 * (c * k * k) as f64);
    let data = x.data();
    let plane = h * w;
    let sample = c * plane;
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let a = &data[i * sample..(i + 1) * sample];
            let b = &data[j * sample..(j + 1) * sample];
            let mut acc = 0.0;
            for ch in 0..c {
                let ap = &a[ch * plane..(ch + 1) * plane];
                let bp = &b[ch * plane..(ch + 1) * plane];
                for ((&av, &bv), &wv) in ap.iter().zip(bp).zip(&weights) {
                    acc += wv * av * bv;
                }
            }
            let v = factor * acc;
            values[i * n + j] = v;
            values[j * n + i] = v;
        }
    }
    NtkMatrix::new(n, values)
}
