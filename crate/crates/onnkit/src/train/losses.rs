//! Distillation losses: softened-softmax KD and tangent-kernel matching.

use crate::error::{Error, Result};
use crate::ntk::{empirical_ntk, NtkMatrix};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// How teacher and student Gram matrices are rescaled before comparison.
/// Parameter counts differ by orders of magnitude, so raw magnitudes are
/// incomparable; trace normalization is the default.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NtkNormalization {
    Trace,
    Frobenius,
    None,
}

/// Softened-softmax distillation: KL(teacher || student) at temperature `t`,
/// scaled by t^2 and averaged over the batch. Returns the loss and its
/// gradient with respect to the raw student logits.
pub fn kd_loss(student_logits: &Tensor, teacher_logits: &Tensor, t: f64) -> Result<(f64, Tensor)> {
    if student_logits.shape() != teacher_logits.shape() {
        return Err(Error::ShapeMismatch {
            location: "kd_loss".into(),
            expected: format!("{:?}", teacher_logits.shape()),
            got: format!("{:?}", student_logits.shape()),
        });
    }
    if t <= 0.0 {
        return Err(Error::InvalidSpec("kd temperature must be positive".into()));
    }
    let n = student_logits.batch_size();
    let k = student_logits.sample_len();
    let ps = crate::net::softened_softmax(student_logits.data(), n, k, t);
    let pt = crate::net::softened_softmax(teacher_logits.data(), n, k, t);
    let mut loss = 0.0;
    for (s, tch) in ps.iter().zip(&pt) {
        if *tch > 0.0 {
            loss += tch * (tch.ln() - s.max(1e-300).ln());
        }
    }
    loss *= t * t / n as f64;
    // d/ds_c [t^2 * KL] = t * (p_s - p_t), averaged over the batch.
    let grad = Tensor::new(
        student_logits.shape().to_vec(),
        ps.iter()
            .zip(&pt)
            .map(|(s, tch)| t * (s - tch) / n as f64)
            .collect(),
    )?;
    Ok((loss, grad))
}

/// Normalization factor c such that c * theta is compared.
fn norm_factor(theta: &NtkMatrix, norm: NtkNormalization) -> Result<f64> {
    let n = theta.n() as f64;
    match norm {
        NtkNormalization::Trace => {
            let tr = theta.trace();
            if tr <= 0.0 {
                return Err(Error::Numerical(
                    "zero-trace kernel under trace normalization".into(),
                ));
            }
            Ok(n / tr)
        }
        NtkNormalization::Frobenius => {
            let f = theta.frobenius_norm();
            if f <= 0.0 {
                return Err(Error::Numerical(
                    "zero-norm kernel under frobenius normalization".into(),
                ));
            }
            Ok(n / f)
        }
        NtkNormalization::None => Ok(1.0),
    }
}

/// Tangent-kernel matching loss from precomputed Gram matrices: mean squared
/// entrywise difference of the normalized kernels. Returns the loss and
/// dL/dTheta_student (n x n), through which gradients flow to the student
/// only (the teacher kernel is a constant).
pub fn ntkd_from_grams(
    theta_teacher: &NtkMatrix,
    theta_student: &NtkMatrix,
    norm: NtkNormalization,
) -> Result<(f64, Vec<f64>)> {
    let n = theta_student.n();
    if theta_teacher.n() != n {
        return Err(Error::ShapeMismatch {
            location: "ntkd_from_grams".into(),
            expected: format!("{n} x {n} teacher kernel"),
            got: format!("{0} x {0}", theta_teacher.n()),
        });
    }
    let cs = norm_factor(theta_student, norm)?;
    let ct = norm_factor(theta_teacher, norm)?;
    let n2 = (n * n) as f64;
    let ts = theta_student.values();
    let tt = theta_teacher.values();

    let mut loss = 0.0;
    let mut dot_d_ts = 0.0; // <D, Theta_s>
    for (s, t) in ts.iter().zip(tt) {
        let d = cs * s - ct * t;
        loss += d * d;
        dot_d_ts += d * s;
    }
    loss /= n2;

    // W = dL/dTheta_s = (2/n^2) [cs * D + (dcs/dTheta_s) <D, Theta_s>]
    let mut w = vec![0.0; n * n];
    for (i, (s, t)) in ts.iter().zip(tt).enumerate() {
        w[i] = 2.0 / n2 * cs * (cs * s - ct * t);
    }
    match norm {
        NtkNormalization::Trace => {
            // dcs/dTheta_kl = -(n / tr^2) delta_kl
            let tr = theta_student.trace();
            let coeff = 2.0 / n2 * (n as f64 / (tr * tr)) * dot_d_ts;
            for i in 0..n {
                w[i * n + i] -= coeff;
            }
        }
        NtkNormalization::Frobenius => {
            // dcs/dTheta_kl = -(n / ||Theta||^3) Theta_kl
            let f = theta_student.frobenius_norm();
            let coeff = 2.0 / n2 * (n as f64 / (f * f * f)) * dot_d_ts;
            for (wi, s) in w.iter_mut().zip(ts) {
                *wi -= coeff * s;
            }
        }
        NtkNormalization::None => {}
    }
    Ok((loss, w))
}

/// Tangent-kernel matching loss from raw Jacobians, per the distillation
/// objective: Theta = J J^T on each side, normalized, mean squared entry
/// difference. Returns the loss and dL/dJ_student (n x p_student), the
/// quantity the double-backprop pass turns into parameter gradients.
pub fn ntkd_loss(
    j_teacher: &Tensor,
    j_student: &Tensor,
    norm: NtkNormalization,
) -> Result<(f64, Tensor)> {
    let n = j_student.shape()[0];
    if j_teacher.shape()[0] != n {
        return Err(Error::ShapeMismatch {
            location: "ntkd_loss".into(),
            expected: format!("{n} teacher Jacobian rows"),
            got: format!("{}", j_teacher.shape()[0]),
        });
    }
    let theta_t = empirical_ntk(j_teacher)?;
    let theta_s = empirical_ntk(j_student)?;
    let (loss, w) = ntkd_from_grams(&theta_t, &theta_s, norm)?;
    // dL/dJ = (W + W^T) J = 2 W J for symmetric W.
    let p = j_student.shape()[1];
    let js = j_student.data();
    let mut grad = vec![0.0; n * p];
    for i in 0..n {
        for l in 0..n {
            let wv = w[i * n + l] + w[l * n + i];
            if wv == 0.0 {
                continue;
            }
            let row_l = &js[l * p..(l + 1) * p];
            let out = &mut grad[i * p..(i + 1) * p];
            for (o, v) in out.iter_mut().zip(row_l) {
                *o += wv * v;
            }
        }
    }
    Ok((loss, Tensor::new(vec![n, p], grad)?))
}
