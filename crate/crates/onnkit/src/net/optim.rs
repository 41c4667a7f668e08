//! SGD and Adam parameter updates.

use super::Network;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerHyper {
    pub kind: OptimizerKind,
    pub lr: f64,
}

/// Stateful optimizer; Adam keeps first/second moments per parameter and
/// applies bias correction.
pub struct Optimizer {
    hyper: OptimizerHyper,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Optimizer {
    pub fn new(hyper: OptimizerHyper, net: &Network) -> Self {
        let zeros: Vec<Tensor> = net.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            hyper,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, net: &mut Network, grads: &[Tensor]) {
        debug_assert_eq!(grads.len(), net.params().len());
        let lr = self.hyper.lr;
        match self.hyper.kind {
            OptimizerKind::Sgd => {
                for (p, g) in net.params_mut().iter_mut().zip(grads) {
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= lr * gv;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                self.t += 1;
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                for ((p, g), (m, v)) in net
                    .params_mut()
                    .iter_mut()
                    .zip(grads)
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                {
                    for (((pv, &gv), mv), vv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        *mv = beta1 * *mv + (1.0 - beta1) * gv;
                        *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                        let mhat = *mv / bc1;
                        let vhat = *vv / bc2;
                        *pv -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{build_network, LayerSpec, NetworkSpec, Parameterization};

    fn scalar_net(value: f64) -> Network {
        let spec = NetworkSpec::new(vec![LayerSpec::dense_no_bias(1, 1)], Parameterization::Standard, 0);
        let mut net = build_network(&spec, 0).unwrap();
        net.params_mut()[0].data_mut()[0] = value;
        net
    }

    #[test]
    fn sgd_step_matches_hand_value() {
        let mut net = scalar_net(0.5);
        let mut opt = Optimizer::new(
            OptimizerHyper {
                kind: OptimizerKind::Sgd,
                lr: 0.1,
            },
            &net,
        );
        let g = vec![Tensor::new(vec![1, 1], vec![1.0]).unwrap()];
        opt.step(&mut net, &g);
        assert!((net.params()[0].data()[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr_times_sign() {
        // With bias correction the first update is lr * g / (|g| + eps').
        let mut net = scalar_net(0.0);
        let lr = 0.01;
        let mut opt = Optimizer::new(
            OptimizerHyper {
                kind: OptimizerKind::adam(),
                lr,
            },
            &net,
        );
        let g = vec![Tensor::new(vec![1, 1], vec![-3.7]).unwrap()];
        opt.step(&mut net, &g);
        let moved = net.params()[0].data()[0];
        assert!((moved - lr).abs() < 1e-6, "expected ~{lr}, got {moved}");
    }

    #[test]
    fn zero_grad_keeps_params_sgd() {
        let mut net = scalar_net(1.25);
        let mut opt = Optimizer::new(
            OptimizerHyper {
                kind: OptimizerKind::Sgd,
                lr: 0.5,
            },
            &net,
        );
        let g = vec![Tensor::new(vec![1, 1], vec![0.0]).unwrap()];
        opt.step(&mut net, &g);
        assert_eq!(net.params()[0].data()[0], 1.25);
    }
}
