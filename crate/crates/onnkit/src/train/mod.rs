//! Teacher pretraining and student training with the three transfer
//! strategies: plain end-to-end supervision, classical distillation on
//! softened outputs, and tangent-kernel distillation.
//!
//! The batch partition is fixed once per run (shuffled by seed), which lets
//! the teacher's per-batch outputs and Gram matrices be computed once and
//! reused across epochs; the teacher is frozen throughout.

mod losses;

pub use losses::{kd_loss, ntkd_from_grams, ntkd_loss, NtkNormalization};

use crate::data::{LabeledDataset, Targets};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport, Task};
use crate::net::{
    build_network, LossKind, LossTarget, Network, NetworkSpec, Optimizer, OptimizerHyper,
    ParamScope, Scalarization,
};
use crate::ntk::{empirical_ntk, NtkMatrix};
use crate::rng::{derive, rng_from_seed};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    E2e,
    Kd,
    Ntkd,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub strategy: Strategy,
    /// Weight of the supervised loss.
    pub alpha: f64,
    /// Weight of the transfer loss (kd or ntkd).
    pub beta: f64,
    pub kd_temperature: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerHyper,
    pub ntk_normalization: NtkNormalization,
    pub loss_kind: LossKind,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidSpec("epochs and batch_size must be >= 1".into()));
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::InvalidSpec("loss weights must be non-negative".into()));
        }
        if self.kd_temperature <= 0.0 {
            return Err(Error::InvalidSpec("kd temperature must be positive".into()));
        }
        if matches!(self.strategy, Strategy::Ntkd) {
            if self.alpha + self.beta <= 0.0 {
                return Err(Error::InvalidSpec("ntkd requires alpha + beta > 0".into()));
            }
            // A kernel on one sample is a scalar; matching it is vacuous.
            if self.batch_size < 2 && self.beta > 0.0 {
                return Err(Error::InvalidSpec("ntkd requires batch_size >= 2".into()));
            }
        }
        Ok(())
    }
}

/// A frozen, pretrained teacher.
#[derive(Clone, Debug)]
pub struct TeacherHandle {
    pub network: Network,
    pub task: Task,
    pub reported_metric: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub loss_e2e: f64,
    pub loss_aux: f64,
    pub loss_total: f64,
    pub test_metric: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRow>,
    pub final_eval: EvalReport,
}

impl TrainReport {
    pub fn final_metric(&self) -> f64 {
        self.final_eval.metric
    }

    /// Per-epoch CSV with the documented columns.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("epoch,loss_e2e,loss_aux,test_metric,wall_seconds\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{:.12e},{:.12e},{:.6},{:.3}\n",
                r.epoch, r.loss_e2e, r.loss_aux, r.test_metric, r.wall_seconds
            ));
        }
        out
    }
}

/// One training problem. Student and teacher may see different tensors for
/// the same samples (after fabrication the student sees captured feature
/// maps while the teacher still sees raw images).
pub struct TrainJob<'a> {
    pub student_inputs: &'a Tensor,
    pub teacher_inputs: Option<&'a Tensor>,
    pub targets: &'a Targets,
    pub test_inputs: &'a Tensor,
    pub test_targets: &'a Targets,
    /// Which student parameters train (backend-only during compensation).
    pub scope: ParamScope,
}

fn scalarization_for(loss_kind: LossKind) -> Scalarization {
    match loss_kind {
        // Keeps the per-sample reduction of dense prediction maps bounded.
        LossKind::Mse => Scalarization::MeanOutputs,
        LossKind::CrossEntropy => Scalarization::SumOutputs,
    }
}

/// Evaluates a network over a dataset in bounded-size chunks.
pub fn eval_network(net: &Network, inputs: &Tensor, targets: &Targets) -> Result<EvalReport> {
    let n = inputs.batch_size();
    let chunk = 256;
    let mut out_data = Vec::new();
    let mut out_shape: Option<Vec<usize>> = None;
    let mut at = 0;
    while at < n {
        let hi = (at + chunk).min(n);
        let idx: Vec<usize> = (at..hi).collect();
        let batch = inputs.gather(&idx);
        let y = net.forward(&batch)?;
        if out_shape.is_none() {
            let mut s = y.shape().to_vec();
            s[0] = n;
            out_shape = Some(s);
        }
        out_data.extend_from_slice(y.data());
        at = hi;
    }
    let outputs = Tensor::new(out_shape.unwrap(), out_data)?;
    evaluate(&outputs, targets)
}

fn gather_targets(targets: &Targets, idx: &[usize]) -> Targets {
    match targets {
        Targets::Classes(v) => Targets::Classes(idx.iter().map(|&i| v[i]).collect()),
        Targets::Masks(m) => Targets::Masks(m.gather(idx)),
    }
}

fn target_ref<'a>(t: &'a Targets, mask_store: &'a Option<Tensor>) -> LossTarget<'a> {
    match t {
        Targets::Classes(v) => LossTarget::Classes(v),
        Targets::Masks(_) => LossTarget::Dense(mask_store.as_ref().unwrap()),
    }
}

/// Sums per-sample Hessian-vector products of the scalarized student output
/// against the rows of `dl_dj`, yielding the parameter gradient of the
/// kernel-matching loss.
fn ntkd_param_grad(
    student: &Network,
    batch: &Tensor,
    dl_dj: &Tensor,
    scalarization: Scalarization,
    scope: &ParamScope,
) -> Result<Vec<f64>> {
    let n = batch.batch_size();
    let p = dl_dj.shape()[1];
    let partials: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let sample = batch.sample_tensor(i);
            student.hvp_scalarized(&sample, scalarization, &dl_dj.data()[i * p..(i + 1) * p], scope)
        })
        .collect::<Result<_>>()?;
    let mut acc = vec![0.0; p];
    for part in &partials {
        for (a, v) in acc.iter_mut().zip(part) {
            *a += v;
        }
    }
    Ok(acc)
}

/// Core training loop shared by teacher pretraining, student training and
/// post-fabrication compensation.
pub fn run_training(
    mut net: Network,
    teacher: Option<&Network>,
    job: &TrainJob,
    config: &TrainConfig,
) -> Result<(Network, TrainReport)> {
    config.validate()?;
    if matches!(config.strategy, Strategy::Kd | Strategy::Ntkd) && teacher.is_none() {
        return Err(Error::InvalidSpec(format!(
            "strategy {:?} requires a teacher",
            config.strategy
        )));
    }
    let n = job.student_inputs.batch_size();
    if job.targets.len() != n {
        return Err(Error::ShapeMismatch {
            location: "run_training".into(),
            expected: format!("{n} targets"),
            got: format!("{}", job.targets.len()),
        });
    }

    // Fixed batch partition: shuffle once, then chunk. Partial trailing
    // batches are dropped (an ntkd kernel needs >= 2 samples anyway).
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_from_seed(derive(config.seed, "batch-order"));
    order.shuffle(&mut rng);
    let batches: Vec<Vec<usize>> = order
        .chunks(config.batch_size)
        .filter(|c| c.len() == config.batch_size)
        .map(|c| c.to_vec())
        .collect();
    if batches.is_empty() {
        return Err(Error::InvalidSpec(format!(
            "batch_size {} exceeds training set size {n}",
            config.batch_size
        )));
    }

    let aux_active = config.beta > 0.0 && !matches!(config.strategy, Strategy::E2e);
    let scalarization = scalarization_for(config.loss_kind);
    let mut teacher_outputs: Vec<Option<Tensor>> = vec![None; batches.len()];
    let mut teacher_ntk: Vec<Option<NtkMatrix>> = vec![None; batches.len()];

    let mut optimizer = Optimizer::new(config.optimizer, &net);
    let mut rows = Vec::with_capacity(config.epochs);
    let started = Instant::now();

    for epoch in 0..config.epochs {
        let mut sum_e2e = 0.0;
        let mut sum_aux = 0.0;
        for (bi, idx) in batches.iter().enumerate() {
            let batch = job.student_inputs.gather(idx);
            let batch_targets = gather_targets(job.targets, idx);
            let mask_store = match &batch_targets {
                Targets::Masks(m) => Some(m.clone()),
                _ => None,
            };
            let tref = target_ref(&batch_targets, &mask_store);

            let (loss_e2e, mut grads) = net
                .loss_and_grad_scoped(&batch, &tref, config.loss_kind, &job.scope)
                .map_err(|e| Error::Numerical(format!("training diverged at epoch {epoch}: {e}")))?;
            for g in &mut grads {
                g.scale(config.alpha);
            }

            let mut loss_aux = 0.0;
            if aux_active {
                let teacher_net = teacher.unwrap();
                let teacher_batch = job
                    .teacher_inputs
                    .map(|t| t.gather(idx))
                    .unwrap_or_else(|| batch.clone());
                match config.strategy {
                    Strategy::Kd => {
                        let t_out = match &teacher_outputs[bi] {
                            Some(t) => t.clone(),
                            None => {
                                let t = teacher_net.forward(&teacher_batch)?;
                                teacher_outputs[bi] = Some(t.clone());
                                t
                            }
                        };
                        let s_out = net.forward(&batch)?;
                        let (l, out_grad) = match config.loss_kind {
                            LossKind::CrossEntropy => {
                                kd_loss(&s_out, &t_out, config.kd_temperature)?
                            }
                            // Dense prediction distillation matches raw
                            // outputs.
                            LossKind::Mse => {
                                let len = s_out.len() as f64;
                                let mut grad = vec![0.0; s_out.len()];
                                let mut l = 0.0;
                                for (i, (a, b)) in s_out.data().iter().zip(t_out.data()).enumerate()
                                {
                                    let d = a - b;
                                    l += d * d;
                                    grad[i] = 2.0 * d / len;
                                }
                                (l / len, Tensor::new(s_out.shape().to_vec(), grad)?)
                            }
                        };
                        loss_aux = l;
                        let trace = net.forward_trace(&batch, false)?;
                        let mut scaled = out_grad.into_data();
                        for g in &mut scaled {
                            *g *= config.beta;
                        }
                        let (kd_grads, _) = net.backward(&trace, scaled, &job.scope, false);
                        for (g, kg) in grads.iter_mut().zip(&kd_grads) {
                            for (a, b) in g.data_mut().iter_mut().zip(kg.data()) {
                                *a += b;
                            }
                        }
                    }
                    Strategy::Ntkd => {
                        let theta_t = match &teacher_ntk[bi] {
                            Some(t) => t.clone(),
                            None => {
                                let j_t = teacher_net.per_sample_jacobian(
                                    &teacher_batch,
                                    scalarization,
                                    &ParamScope::All,
                                )?;
                                let t = empirical_ntk(&j_t)?;
                                teacher_ntk[bi] = Some(t.clone());
                                t
                            }
                        };
                        let j_s = net.per_sample_jacobian(&batch, scalarization, &job.scope)?;
                        let theta_s = empirical_ntk(&j_s)?;
                        let (l, w) = ntkd_from_grams(&theta_t, &theta_s, config.ntk_normalization)?;
                        loss_aux = l;
                        // dL/dJ = 2 W J, then per-sample HVPs give dL/dtheta.
                        let nb = idx.len();
                        let p = j_s.shape()[1];
                        let mut dl_dj = vec![0.0; nb * p];
                        for i in 0..nb {
                            for l2 in 0..nb {
                                let wv = w[i * nb + l2] + w[l2 * nb + i];
                                if wv == 0.0 {
                                    continue;
                                }
                                let row = &j_s.data()[l2 * p..(l2 + 1) * p];
                                let out = &mut dl_dj[i * p..(i + 1) * p];
                                for (o, v) in out.iter_mut().zip(row) {
                                    *o += wv * v;
                                }
                            }
                        }
                        let dl_dj = Tensor::new(vec![nb, p], dl_dj)?;
                        let aux_grad =
                            ntkd_param_grad(&net, &batch, &dl_dj, scalarization, &job.scope)?;
                        let aux_tensors = net.unflatten_scoped(&aux_grad, &job.scope);
                        for (g, ag) in grads.iter_mut().zip(&aux_tensors) {
                            for (a, b) in g.data_mut().iter_mut().zip(ag.data()) {
                                *a += config.beta * b;
                            }
                        }
                    }
                    Strategy::E2e => unreachable!(),
                }
            }

            let total = config.alpha * loss_e2e + config.beta * loss_aux;
            if !total.is_finite() {
                return Err(Error::Numerical(format!(
                    "training diverged at epoch {epoch}: non-finite loss"
                )));
            }
            sum_e2e += loss_e2e;
            sum_aux += loss_aux;
            optimizer.step(&mut net, &grads);
        }

        let loss_e2e = sum_e2e / batches.len() as f64;
        let loss_aux = sum_aux / batches.len() as f64;
        let eval = eval_network(&net, job.test_inputs, job.test_targets)?;
        rows.push(EpochRow {
            epoch,
            loss_e2e,
            loss_aux,
            loss_total: config.alpha * loss_e2e + config.beta * loss_aux,
            test_metric: eval.metric,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
    }

    let final_eval = eval_network(&net, job.test_inputs, job.test_targets)?;
    Ok((net, TrainReport { epochs: rows, final_eval }))
}

/// Trains a teacher from scratch with plain supervision.
pub fn pretrain_teacher(
    spec: &NetworkSpec,
    train: &LabeledDataset,
    test: &LabeledDataset,
    config: &TrainConfig,
) -> Result<(TeacherHandle, TrainReport)> {
    let mut cfg = config.clone();
    cfg.strategy = Strategy::E2e;
    cfg.beta = 0.0;
    let net = build_network(spec, derive(cfg.seed, "teacher-init"))?;
    let job = TrainJob {
        student_inputs: &train.images,
        teacher_inputs: None,
        targets: &train.targets,
        test_inputs: &test.images,
        test_targets: &test.targets,
        scope: ParamScope::All,
    };
    let (net, report) = run_training(net, None, &job, &cfg)?;
    let task = match train.targets {
        Targets::Classes(_) => Task::Classification,
        Targets::Masks(_) => Task::Segmentation,
    };
    Ok((
        TeacherHandle {
            network: net,
            task,
            reported_metric: report.final_metric(),
        },
        report,
    ))
}

/// Trains a hybrid student against a frozen teacher with the configured
/// strategy; all student parameters (frontend and backend) are optimized.
pub fn train_student(
    student: Network,
    teacher: &TeacherHandle,
    train: &LabeledDataset,
    test: &LabeledDataset,
    config: &TrainConfig,
) -> Result<(Network, TrainReport)> {
    let job = TrainJob {
        student_inputs: &train.images,
        teacher_inputs: None,
        targets: &train.targets,
        test_inputs: &test.images,
        test_targets: &test.targets,
        scope: ParamScope::All,
    };
    run_training(student, Some(&teacher.network), &job, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{LayerSpec, OptimizerKind, Parameterization};

    fn tiny_dataset(n: usize, seed: u64) -> LabeledDataset {
        crate::data::gen_synthetic_digits(n, seed, &crate::data::DigitParams::default()).unwrap()
    }

    fn tiny_spec() -> NetworkSpec {
        NetworkSpec::new(
            vec![
                LayerSpec::Flatten,
                LayerSpec::dense(784, 12),
                LayerSpec::Relu,
                LayerSpec::dense(12, 10),
            ],
            Parameterization::Standard,
            0,
        )
    }

    fn quick_config(strategy: Strategy) -> TrainConfig {
        TrainConfig {
            strategy,
            alpha: 1.0,
            beta: 1.0,
            kd_temperature: 4.0,
            epochs: 1,
            batch_size: 8,
            seed: 3,
            optimizer: OptimizerHyper {
                kind: OptimizerKind::adam(),
                lr: 1e-3,
            },
            ntk_normalization: NtkNormalization::Trace,
            loss_kind: LossKind::CrossEntropy,
        }
    }

    #[test]
    fn smoke_pretrain_beats_chance() {
        let train = tiny_dataset(100, 1);
        let test = tiny_dataset(50, 2);
        let mut cfg = quick_config(Strategy::E2e);
        cfg.epochs = 3;
        cfg.optimizer.lr = 3e-3;
        let (teacher, report) = pretrain_teacher(&tiny_spec(), &train, &test, &cfg).unwrap();
        assert!(teacher.reported_metric > 0.2, "{}", report.final_metric());
    }

    #[test]
    fn pretrain_same_seed_identical_params() {
        let train = tiny_dataset(60, 5);
        let test = tiny_dataset(20, 6);
        let cfg = quick_config(Strategy::E2e);
        let (a, _) = pretrain_teacher(&tiny_spec(), &train, &test, &cfg).unwrap();
        let (b, _) = pretrain_teacher(&tiny_spec(), &train, &test, &cfg).unwrap();
        for (x, y) in a.network.params().iter().zip(b.network.params()) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn ntkd_with_zero_beta_matches_e2e_exactly() {
        let train = tiny_dataset(60, 7);
        let test = tiny_dataset(20, 8);
        let (teacher, _) = pretrain_teacher(&tiny_spec(), &train, &test, &quick_config(Strategy::E2e)).unwrap();
        let student_spec = tiny_spec();
        let s0 = build_network(&student_spec, 42).unwrap();

        let mut e2e_cfg = quick_config(Strategy::E2e);
        e2e_cfg.seed = 11;
        let (net_a, _) = train_student(s0.clone(), &teacher, &train, &test, &e2e_cfg).unwrap();

        let mut ntkd_cfg = quick_config(Strategy::Ntkd);
        ntkd_cfg.beta = 0.0;
        ntkd_cfg.seed = 11;
        let (net_b, _) = train_student(s0, &teacher, &train, &test, &ntkd_cfg).unwrap();

        for (x, y) in net_a.params().iter().zip(net_b.params()) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn loss_decomposition_is_exact() {
        let train = tiny_dataset(40, 9);
        let test = tiny_dataset(16, 10);
        let (teacher, _) = pretrain_teacher(&tiny_spec(), &train, &test, &quick_config(Strategy::E2e)).unwrap();
        let s0 = build_network(&tiny_spec(), 21).unwrap();
        let mut cfg = quick_config(Strategy::Kd);
        cfg.alpha = 0.7;
        cfg.beta = 0.3;
        let (_, report) = train_student(s0, &teacher, &train, &test, &cfg).unwrap();
        for row in &report.epochs {
            let want = cfg.alpha * row.loss_e2e + cfg.beta * row.loss_aux;
            assert!((row.loss_total - want).abs() < 1e-9);
        }
    }

    #[test]
    fn kd_and_ntkd_require_teacher() {
        let train = tiny_dataset(20, 12);
        let test = tiny_dataset(10, 13);
        let s0 = build_network(&tiny_spec(), 2).unwrap();
        let job = TrainJob {
            student_inputs: &train.images,
            teacher_inputs: None,
            targets: &train.targets,
            test_inputs: &test.images,
            test_targets: &test.targets,
            scope: ParamScope::All,
        };
        let err = run_training(s0, None, &job, &quick_config(Strategy::Ntkd)).unwrap_err();
        assert!(err.to_string().contains("teacher"));
    }

    #[test]
    fn ntkd_batch_size_one_rejected() {
        let mut cfg = quick_config(Strategy::Ntkd);
        cfg.batch_size = 1;
        assert!(cfg.validate().is_err());
    }
}
