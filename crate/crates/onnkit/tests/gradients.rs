//! Finite-difference validation of every differentiable path: plain layer
//! gradients under both losses, per-sample Jacobian rows, and exact
//! Hessian-vector products.

mod common;

use common::{assert_close_rel, fd_grad, fd_grad_scoped, scalarized_output};
use onnkit::net::{
    build_network, LayerSpec, LossKind, LossTarget, NetworkSpec, Padding, ParamScope,
    Parameterization, Scalarization,
};
use onnkit::rng::rng_from_seed;
use onnkit::tensor::Tensor;
use rand::Rng;

const H: f64 = 1e-5;
const REL: f64 = 1e-4;
const FLOOR: f64 = 1e-8;

fn random_tensor(shape: &[usize], rng: &mut onnkit::rng::Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// A bestiary of small architectures covering every layer kind.
fn test_specs() -> Vec<(NetworkSpec, Vec<usize>)> {
    let mut specs = Vec::new();
    // dense / relu chain
    specs.push((
        NetworkSpec::new(
            vec![
                LayerSpec::dense(6, 5),
                LayerSpec::Relu,
                LayerSpec::dense(5, 3),
            ],
            Parameterization::Standard,
            0,
        ),
        vec![6],
    ));
    // conv valid -> relu -> flatten -> dense
    specs.push((
        NetworkSpec::new(
            vec![
                LayerSpec::conv2d(1, 3, 3, Padding::Valid),
                LayerSpec::Flatten,
                LayerSpec::Relu,
                LayerSpec::dense(3 * 4 * 4, 4),
            ],
            Parameterization::Standard,
            1,
        ),
        vec![1, 6, 6],
    ));
    // rgb conv same -> relu -> conv same (biased), segmentation-shaped
    specs.push((
        NetworkSpec::new(
            vec![
                LayerSpec::conv2d(3, 2, 3, Padding::Same),
                LayerSpec::Relu,
                LayerSpec::conv2d_biased(2, 1, 3, Padding::Same),
            ],
            Parameterization::Standard,
            1,
        ),
        vec![3, 5, 5],
    ));
    // upsample in the middle
    specs.push((
        NetworkSpec::new(
            vec![
                LayerSpec::conv2d_biased(1, 2, 3, Padding::Valid),
                LayerSpec::Relu,
                LayerSpec::Upsample2x,
                LayerSpec::conv2d_biased(2, 1, 3, Padding::Same),
            ],
            Parameterization::Standard,
            0,
        ),
        vec![1, 5, 5],
    ));
    // ntk parameterization
    specs.push((
        NetworkSpec::new(
            vec![
                LayerSpec::dense_no_bias(4, 8),
                LayerSpec::Relu,
                LayerSpec::dense_no_bias(8, 2),
            ],
            Parameterization::Ntk,
            0,
        ),
        vec![4],
    ));
    specs.push((
        NetworkSpec::new(
            vec![
                LayerSpec::conv2d(1, 2, 3, Padding::Valid),
                LayerSpec::Flatten,
                LayerSpec::Relu,
                LayerSpec::dense_no_bias(2 * 3 * 3, 3),
            ],
            Parameterization::Ntk,
            1,
        ),
        vec![1, 5, 5],
    ));
    specs
}

fn batch_shape(sample: &[usize], n: usize) -> Vec<usize> {
    let mut s = vec![n];
    s.extend_from_slice(sample);
    s
}

#[test]
fn layer_gradients_match_finite_differences() {
    let specs = test_specs();
    let mut checked = 0;
    for (si, (spec, sample_shape)) in specs.iter().enumerate() {
        for trial in 0..5 {
            let seed = (si * 100 + trial) as u64;
            let mut rng = rng_from_seed(seed);
            let mut net = build_network(spec, seed).unwrap();
            let n = 2 + (trial % 2);
            let x = random_tensor(&batch_shape(sample_shape, n), &mut rng);

            // cross-entropy when the output is flat, mse always applicable
            let out = net.forward(&x).unwrap();
            let k = out.len() / n;
            let target_dense = random_tensor(out.shape(), &mut rng);
            let (_, grads) = net
                .loss_and_grad(&x, &LossTarget::Dense(&target_dense), LossKind::Mse)
                .unwrap();
            let flat = net.flatten_scoped(&grads, &ParamScope::All);
            let fd = fd_grad(&mut net, H, |m| {
                let o = m.forward(&x).unwrap();
                let mut loss = 0.0;
                for (a, b) in o.data().iter().zip(target_dense.data()) {
                    loss += (a - b) * (a - b);
                }
                loss / o.len() as f64
            });
            assert_close_rel(&flat, &fd, REL, FLOOR, &format!("mse grad spec {si} trial {trial}"));
            checked += 1;

            if out.shape().len() == 2 && k >= 2 {
                let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
                let (_, grads) = net
                    .loss_and_grad(&x, &LossTarget::Classes(&labels), LossKind::CrossEntropy)
                    .unwrap();
                let flat = net.flatten_scoped(&grads, &ParamScope::All);
                let fd = fd_grad(&mut net, H, |m| {
                    let o = m.forward(&x).unwrap();
                    let mut loss = 0.0;
                    for (b, &y) in labels.iter().enumerate() {
                        let row = &o.data()[b * k..(b + 1) * k];
                        let mx = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
                        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                        loss -= row[y] - mx - z.ln();
                    }
                    loss / n as f64
                });
                assert_close_rel(&flat, &fd, REL, FLOOR, &format!("ce grad spec {si} trial {trial}"));
                checked += 1;
            }
        }
    }
    assert!(checked >= 40, "expected at least 40 gradient checks, ran {checked}");
}

#[test]
fn jacobian_rows_match_finite_differences() {
    let specs = test_specs();
    for (si, (spec, sample_shape)) in specs.iter().enumerate() {
        let seed = 900 + si as u64;
        let mut rng = rng_from_seed(seed);
        let net = build_network(spec, seed).unwrap();
        let n = 3;
        let x = random_tensor(&batch_shape(sample_shape, n), &mut rng);
        let jac = net
            .per_sample_jacobian(&x, Scalarization::SumOutputs, &ParamScope::All)
            .unwrap();
        let p = net.param_count();
        for i in 0..n {
            let sample = x.sample_tensor(i);
            let mut m = net.clone();
            let fd = fd_grad(&mut m, H, |m| {
                scalarized_output(m, &sample, Scalarization::SumOutputs)
            });
            assert_close_rel(
                &jac.data()[i * p..(i + 1) * p],
                &fd,
                REL,
                FLOOR,
                &format!("jacobian row {i} spec {si}"),
            );
        }
    }
}

#[test]
fn per_output_jacobian_matches_columnwise_finite_differences() {
    // K=3 outputs, n=2 samples: rows i*K + c hold the gradient of output c.
    let spec = NetworkSpec::new(
        vec![
            LayerSpec::dense(4, 5),
            LayerSpec::Relu,
            LayerSpec::dense(5, 3),
        ],
        Parameterization::Standard,
        0,
    );
    let net = build_network(&spec, 31).unwrap();
    let mut rng = rng_from_seed(77);
    let x = random_tensor(&[2, 4], &mut rng);
    let jac = net
        .per_sample_jacobian(&x, Scalarization::PerOutput, &ParamScope::All)
        .unwrap();
    let p = net.param_count();
    assert_eq!(jac.shape(), &[6, p]);
    for i in 0..2 {
        let sample = x.sample_tensor(i);
        for c in 0..3 {
            let mut m = net.clone();
            let fd = fd_grad(&mut m, H, |m| m.forward(&sample).unwrap().data()[c]);
            assert_close_rel(
                &jac.data()[(i * 3 + c) * p..(i * 3 + c + 1) * p],
                &fd,
                REL,
                FLOOR,
                &format!("per-output row sample {i} output {c}"),
            );
        }
    }
}

#[test]
fn scoped_jacobian_selects_backend_params_only() {
    let spec = NetworkSpec::new(
        vec![
            LayerSpec::conv2d(1, 2, 3, Padding::Valid),
            LayerSpec::Flatten,
            LayerSpec::Relu,
            LayerSpec::dense(2 * 3 * 3, 2),
        ],
        Parameterization::Standard,
        1,
    );
    let net = build_network(&spec, 5).unwrap();
    let mut rng = rng_from_seed(5);
    let x = random_tensor(&[2, 1, 5, 5], &mut rng);
    let jac = net
        .per_sample_jacobian(&x, Scalarization::SumOutputs, &ParamScope::Backend)
        .unwrap();
    let p_backend = net.scoped_dim(&ParamScope::Backend);
    assert_eq!(jac.shape(), &[2, p_backend]);
    let sample = x.sample_tensor(0);
    let mut m = net.clone();
    let fd = fd_grad_scoped(&mut m, &ParamScope::Backend, H, |m| {
        scalarized_output(m, &sample, Scalarization::SumOutputs)
    });
    assert_close_rel(&jac.data()[..p_backend], &fd, REL, FLOOR, "backend jacobian row");
}

#[test]
fn hvp_matches_finite_differences_of_gradient() {
    let specs = test_specs();
    for (si, (spec, sample_shape)) in specs.iter().enumerate() {
        let seed = 400 + si as u64;
        let mut rng = rng_from_seed(seed);
        let net = build_network(spec, seed).unwrap();
        let x = random_tensor(&batch_shape(sample_shape, 1), &mut rng);
        let p = net.param_count();
        let v: Vec<f64> = (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let hv = net
            .hvp_scalarized(&x, Scalarization::SumOutputs, &v, &ParamScope::All)
            .unwrap();

        // FD of the gradient along v: (grad(theta + h v) - grad(theta - h v)) / 2h
        let h = 1e-5;
        let mut plus = net.clone();
        let vt = net.unflatten_scoped(&v, &ParamScope::All);
        for (pt, tv) in plus.params_mut().iter_mut().zip(&vt) {
            for (a, b) in pt.data_mut().iter_mut().zip(tv.data()) {
                *a += h * b;
            }
        }
        let mut minus = net.clone();
        for (pt, tv) in minus.params_mut().iter_mut().zip(&vt) {
            for (a, b) in pt.data_mut().iter_mut().zip(tv.data()) {
                *a -= h * b;
            }
        }
        let row = |m: &onnkit::net::Network| {
            let j = m
                .per_sample_jacobian(&x, Scalarization::SumOutputs, &ParamScope::All)
                .unwrap();
            j.into_data()
        };
        let gp = row(&plus);
        let gm = row(&minus);
        let fd: Vec<f64> = gp
            .iter()
            .zip(&gm)
            .map(|(a, b)| (a - b) / (2.0 * h))
            .collect();
        assert_close_rel(&hv, &fd, 1e-4, 1e-7, &format!("hvp spec {si}"));
    }
}

#[test]
fn hvp_scoped_matches_full_hvp_restriction() {
    let spec = NetworkSpec::new(
        vec![
            LayerSpec::conv2d(1, 2, 3, Padding::Valid),
            LayerSpec::Flatten,
            LayerSpec::Relu,
            LayerSpec::dense(2 * 4 * 4, 3),
        ],
        Parameterization::Standard,
        1,
    );
    let net = build_network(&spec, 8).unwrap();
    let mut rng = rng_from_seed(8);
    let x = random_tensor(&[1, 1, 6, 6], &mut rng);
    let pb = net.scoped_dim(&ParamScope::Backend);
    let vb: Vec<f64> = (0..pb).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let hv_scoped = net
        .hvp_scalarized(&x, Scalarization::SumOutputs, &vb, &ParamScope::Backend)
        .unwrap();

    // Embed the tangent into the full space and restrict the full HVP.
    let vt = net.unflatten_scoped(&vb, &ParamScope::Backend);
    let v_full = net.flatten_scoped(&vt, &ParamScope::All);
    let hv_full = net
        .hvp_scalarized(&x, Scalarization::SumOutputs, &v_full, &ParamScope::All)
        .unwrap();
    let hv_full_t = net.unflatten_scoped(&hv_full, &ParamScope::All);
    let hv_restricted = net.flatten_scoped(&hv_full_t, &ParamScope::Backend);
    assert_close_rel(&hv_scoped, &hv_restricted, 1e-12, 1e-14, "scoped hvp");
}

#[test]
fn ntkd_double_backprop_matches_finite_differences() {
    // Full path: theta -> per-sample Jacobian -> Gram -> matching loss.
    use onnkit::ntk::empirical_ntk;
    use onnkit::train::{ntkd_from_grams, ntkd_loss, NtkNormalization};

    let teacher_spec = NetworkSpec::new(
        vec![
            LayerSpec::Flatten,
            LayerSpec::dense(16, 12),
            LayerSpec::Relu,
            LayerSpec::dense(12, 3),
        ],
        Parameterization::Standard,
        0,
    );
    let student_spec = NetworkSpec::new(
        vec![
            LayerSpec::conv2d(1, 2, 3, Padding::Valid),
            LayerSpec::Flatten,
            LayerSpec::dense(2 * 2 * 2, 5),
            LayerSpec::Relu,
            LayerSpec::dense(5, 3),
        ],
        Parameterization::Standard,
        1,
    );
    let teacher = build_network(&teacher_spec, 51).unwrap();
    let student = build_network(&student_spec, 52).unwrap();
    let mut rng = rng_from_seed(53);
    let batch = random_tensor(&[4, 1, 4, 4], &mut rng);
    let j_t = teacher
        .per_sample_jacobian(&batch, Scalarization::SumOutputs, &ParamScope::All)
        .unwrap();
    let theta_t = empirical_ntk(&j_t).unwrap();

    for norm in [NtkNormalization::Trace, NtkNormalization::None] {
        // Analytic gradient: dL/dJ via ntkd_loss, then per-sample HVPs.
        let j_s = student
            .per_sample_jacobian(&batch, Scalarization::SumOutputs, &ParamScope::All)
            .unwrap();
        let (loss0, dl_dj) = ntkd_loss(&j_t, &j_s, norm).unwrap();
        assert!(loss0 > 0.0);
        let p = student.param_count();
        let mut grad = vec![0.0; p];
        for i in 0..4 {
            let sample = batch.sample_tensor(i);
            let hv = student
                .hvp_scalarized(
                    &sample,
                    Scalarization::SumOutputs,
                    &dl_dj.data()[i * p..(i + 1) * p],
                    &ParamScope::All,
                )
                .unwrap();
            for (g, h) in grad.iter_mut().zip(&hv) {
                *g += h;
            }
        }

        // Finite differences of the scalar loss (double backprop path).
        let mut m = student.clone();
        let fd = fd_grad(&mut m, 1e-5, |m| {
            let j = m
                .per_sample_jacobian(&batch, Scalarization::SumOutputs, &ParamScope::All)
                .unwrap();
            let theta_s = empirical_ntk(&j).unwrap();
            ntkd_from_grams(&theta_t, &theta_s, norm).unwrap().0
        });
        assert_close_rel(&grad, &fd, 1e-3, 1e-8, &format!("ntkd grad {norm:?}"));
    }
}
