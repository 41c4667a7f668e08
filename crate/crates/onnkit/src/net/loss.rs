//! Training losses: softmax cross-entropy and mean squared error.

use super::{Network, ParamScope};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    Mse,
}

pub enum LossTarget<'a> {
    /// Class indices, one per sample.
    Classes(&'a [usize]),
    /// Dense regression / mask target shaped like the network output.
    Dense(&'a Tensor),
}

/// Row-wise softmax with temperature; `logits` is `n x k` flattened.
pub(crate) fn softmax_rows(logits: &[f64], n: usize, k: usize, temperature: f64) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for b in 0..n {
        let row = &logits[b * k..(b + 1) * k];
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v / temperature));
        let mut sum = 0.0;
        for (o, &v) in out[b * k..(b + 1) * k].iter_mut().zip(row) {
            let e = (v / temperature - m).exp();
            *o = e;
            sum += e;
        }
        for o in &mut out[b * k..(b + 1) * k] {
            *o /= sum;
        }
    }
    out
}

/// Loss value and gradient with respect to the raw network output.
pub(crate) fn output_loss_grad(
    output: &[f64],
    n: usize,
    k: usize,
    target: &LossTarget,
    kind: LossKind,
) -> Result<(f64, Vec<f64>)> {
    match (kind, target) {
        (LossKind::CrossEntropy, LossTarget::Classes(labels)) => {
            if labels.len() != n {
                return Err(Error::ShapeMismatch {
                    location: "cross_entropy targets".into(),
                    expected: format!("{n} labels"),
                    got: format!("{}", labels.len()),
                });
            }
            let probs = softmax_rows(output, n, k, 1.0);
            let mut loss = 0.0;
            let mut grad = probs;
            for (b, &y) in labels.iter().enumerate() {
                if y >= k {
                    return Err(Error::Data(format!(
                        "label {y} out of range for {k} classes"
                    )));
                }
                let p = grad[b * k + y].max(1e-300);
                loss -= p.ln();
                grad[b * k + y] -= 1.0;
            }
            let inv_n = 1.0 / n as f64;
            for g in &mut grad {
                *g *= inv_n;
            }
            Ok((loss * inv_n, grad))
        }
        (LossKind::Mse, LossTarget::Dense(t)) => {
            if t.len() != output.len() {
                return Err(Error::ShapeMismatch {
                    location: "mse targets".into(),
                    expected: format!("{} entries", output.len()),
                    got: format!("{}", t.len()),
                });
            }
            let len = output.len() as f64;
            let mut loss = 0.0;
            let mut grad = vec![0.0; output.len()];
            for (i, (&o, &y)) in output.iter().zip(t.data()).enumerate() {
                let d = o - y;
                loss += d * d;
                grad[i] = 2.0 * d / len;
            }
            Ok((loss / len, grad))
        }
        (LossKind::CrossEntropy, LossTarget::Dense(_)) => Err(Error::InvalidSpec(
            "cross_entropy expects class-index targets".into(),
        )),
        (LossKind::Mse, LossTarget::Classes(_)) => Err(Error::InvalidSpec(
            "mse expects dense targets".into(),
        )),
    }
}

impl Network {
    /// Mean batch loss and parameter gradients (forward is checked; a
    /// non-finite activation reports the first offending layer).
    pub fn loss_and_grad(
        &self,
        batch: &Tensor,
        target: &LossTarget,
        kind: LossKind,
    ) -> Result<(f64, Vec<Tensor>)> {
        self.loss_and_grad_scoped(batch, target, kind, &ParamScope::All)
    }

    pub fn loss_and_grad_scoped(
        &self,
        batch: &Tensor,
        target: &LossTarget,
        kind: LossKind,
        scope: &ParamScope,
    ) -> Result<(f64, Vec<Tensor>)> {
        let trace = self.forward_trace(batch, true)?;
        let n = trace.n;
        let k = trace.dims.last().unwrap().volume();
        let (loss, out_grad) = output_loss_grad(trace.output(), n, k, target, kind)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                location: "loss".into(),
            });
        }
        let (grads, _) = self.backward(&trace, out_grad, scope, false);
        Ok((loss, grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{build_network, LayerSpec, NetworkSpec, Parameterization};

    #[test]
    fn uniform_logits_cross_entropy_is_ln_k() {
        let out = vec![0.7; 2 * 10];
        let (loss, _) = output_loss_grad(
            &out,
            2,
            10,
            &LossTarget::Classes(&[3, 9]),
            LossKind::CrossEntropy,
        )
        .unwrap();
        assert!((loss - 10.0f64.ln()).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn mse_zero_when_output_matches_target() {
        let spec = NetworkSpec::new(vec![LayerSpec::dense(3, 2)], Parameterization::Standard, 0);
        let net = build_network(&spec, 9).unwrap();
        let x = Tensor::new(vec![2, 3], vec![0.2, -0.1, 0.5, 1.0, 0.0, -0.3]).unwrap();
        let y = net.forward(&x).unwrap();
        let (loss, grads) = net
            .loss_and_grad(&x, &LossTarget::Dense(&y), LossKind::Mse)
            .unwrap();
        assert_eq!(loss, 0.0);
        for g in grads {
            assert!(g.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn non_finite_input_is_reported() {
        let spec = NetworkSpec::new(vec![LayerSpec::dense(2, 2)], Parameterization::Standard, 0);
        let net = build_network(&spec, 0).unwrap();
        let x = Tensor::new(vec![1, 2], vec![f64::NAN, 0.0]).unwrap();
        let err = net
            .loss_and_grad(&x, &LossTarget::Classes(&[0]), LossKind::CrossEntropy)
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax_rows(&[1.0, 2.0, 3.0, -1.0, 0.0, 1.0], 2, 3, 4.0);
        for b in 0..2 {
            let s: f64 = p[b * 3..(b + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
