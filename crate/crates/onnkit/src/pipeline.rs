//! Stage orchestration behind the CLI: each stage reads the merged config,
//! writes its artifacts under the output directory with stable names, and
//! couples to other stages only through files.

use crate::ckpt;
use crate::config::RunConfig;
use crate::cost::{energy_estimate, mac_count, CostModel, MacScope};
use crate::data::{
    gen_synthetic_digits, gen_synthetic_seg, load_cifar10_bin, load_mnist_idx, DigitParams,
    LabeledDataset,
};
use crate::error::{Error, Result};
use crate::export::export_features;
use crate::layout::{compute_layout, design_to_netspec, Channels, FrontendDesign, LayoutResult};
use crate::metrics::Task;
use crate::net::{
    Dims, LayerSpec, LossKind, Network, NetworkSpec, OptimizerHyper, OptimizerKind, Padding,
    ParamScope, Parameterization, Scalarization,
};
use crate::ntk::{
    estimate_performance, gram_spectrum, ntk_perturbation_experiment, EstimateReport,
    ReferenceKernel, RegressionSetup,
};
use crate::optics::{calibrate, compensate, fabricate, random_frontend, FabricatedFrontend,
    FabricationNoiseSpec};
use crate::rng::{derive, rng_from_seed};
use crate::train::{
    eval_network, pretrain_teacher, run_training, train_student, NtkNormalization, Strategy,
    TeacherHandle, TrainConfig, TrainJob,
};
use serde_json::json;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

fn out_dir(cfg: &RunConfig) -> PathBuf {
    PathBuf::from(&cfg.out_dir)
}

fn prepare_out(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = out_dir(cfg);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("resolved-config.txt"), cfg.resolved())?;
    Ok(dir)
}

fn ckpt_path(cfg: &RunConfig, configured: &str, default_name: &str) -> PathBuf {
    if configured.is_empty() {
        out_dir(cfg).join(default_name)
    } else {
        PathBuf::from(configured)
    }
}

fn require_artifact(path: &Path, produced_by: &str) -> Result<()> {
    if !path.exists() {
        return Err(Error::Data(format!(
            "{} not found: run `{produced_by}` first",
            path.display()
        )));
    }
    Ok(())
}

/// Configures the rayon pool. `--threads 1` or `--deterministic` pin one
/// worker; results are identical either way since all parallel reductions
/// are order-fixed.
pub fn apply_threads(cfg: &RunConfig) {
    let threads = if cfg.deterministic { 1 } else { cfg.threads };
    if threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
}

pub fn task_of(cfg: &RunConfig) -> Task {
    if cfg.dataset == "synthetic_seg" {
        Task::Segmentation
    } else {
        Task::Classification
    }
}

fn split_paths(raw: &str) -> Vec<String> {
    raw.split(';')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

/// Loads (train, test) per the dataset config, applying optional subset
/// sizes deterministically.
pub fn load_datasets(cfg: &RunConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    let (mut train, mut test) = match cfg.dataset.as_str() {
        "synthetic_digits" => {
            let p = DigitParams::default();
            (
                gen_synthetic_digits(cfg.synth_train_n, derive(cfg.synth_seed, "train"), &p)?,
                gen_synthetic_digits(cfg.synth_test_n, derive(cfg.synth_seed, "test"), &p)?,
            )
        }
        "synthetic_seg" => (
            gen_synthetic_seg(cfg.synth_train_n, cfg.synth_resolution, derive(cfg.synth_seed, "train"))?,
            gen_synthetic_seg(cfg.synth_test_n, cfg.synth_resolution, derive(cfg.synth_seed, "test"))?,
        ),
        "mnist" => {
            let train = load_mnist_idx(
                Path::new(&cfg.mnist_train_images),
                Path::new(&cfg.mnist_train_labels),
            )?;
            let test = load_mnist_idx(
                Path::new(&cfg.mnist_test_images),
                Path::new(&cfg.mnist_test_labels),
            )?;
            (train, test)
        }
        "cifar10" => {
            let train = load_cifar10_bin(&split_paths(&cfg.cifar_train))?;
            let test = load_cifar10_bin(&split_paths(&cfg.cifar_test))?;
            (train, test)
        }
        other => {
            return Err(Error::Config(format!(
                "unknown dataset {other:?}; expected mnist, cifar10, synthetic_digits, or synthetic_seg"
            )))
        }
    };
    if cfg.train_n > 0 && cfg.train_n < train.len() {
        train = train.shuffled(derive(cfg.seed, "subset-train")).take(cfg.train_n, "train");
    }
    if cfg.test_n > 0 && cfg.test_n < test.len() {
        test = test.shuffled(derive(cfg.seed, "subset-test")).take(cfg.test_n, "test");
    }
    Ok((train, test))
}

fn frontend_design(cfg: &RunConfig) -> Result<FrontendDesign> {
    let channels = match cfg.channels.as_str() {
        "mono" => Channels::Mono,
        "rgb" => Channels::Rgb,
        other => {
            return Err(Error::Config(format!(
                "channels must be mono or rgb, got {other:?}"
            )))
        }
    };
    Ok(FrontendDesign {
        surface_h_mm: cfg.surface_h_mm,
        surface_w_mm: cfg.surface_w_mm,
        kernel_size_mm: cfg.kernel_size_mm,
        min_spacing_mm: cfg.min_spacing_mm,
        kernel_px: cfg.kernel_px,
        channels,
    })
}

/// The hybrid student architecture for the configured task and layout.
pub fn student_spec(cfg: &RunConfig, layout: &LayoutResult, input: Dims) -> Result<NetworkSpec> {
    let design = frontend_design(cfg)?;
    let Dims::Chw { c, h, w } = input else {
        return Err(Error::InvalidSpec("student input must be an image".into()));
    };
    if c != design.channels.count() {
        return Err(Error::Config(format!(
            "dataset has {c} channels but the design specifies {}",
            design.channels.count()
        )));
    }
    match task_of(cfg) {
        Task::Classification => {
            let k = design.kernel_px;
            if h < k || w < k {
                return Err(Error::InvalidSpec(format!(
                    "images {h}x{w} smaller than kernel {k}"
                )));
            }
            let feat = layout.n_kernels * (h - k + 1) * (w - k + 1);
            let backend = if cfg.backend_hidden > 0 {
                vec![
                    LayerSpec::Flatten,
                    LayerSpec::dense(feat, cfg.backend_hidden),
                    LayerSpec::Relu,
                    LayerSpec::dense(cfg.backend_hidden, 10),
                ]
            } else {
                vec![LayerSpec::Flatten, LayerSpec::dense(feat, 10)]
            };
            design_to_netspec(&design, layout, backend)
        }
        Task::Segmentation => {
            if layout.n_kernels == 0 {
                return Err(Error::InvalidSpec("layout has zero kernels".into()));
            }
            // Same padding keeps dense prediction aligned with the mask.
            let spec = NetworkSpec::new(
                vec![
                    LayerSpec::conv2d(c, layout.n_kernels, design.kernel_px, Padding::Same),
                    LayerSpec::conv2d_biased(layout.n_kernels, 4, 3, Padding::Same),
                    LayerSpec::Relu,
                    LayerSpec::conv2d_biased(4, 1, 3, Padding::Same),
                ],
                Parameterization::Standard,
                1,
            );
            spec.validate()?;
            Ok(spec)
        }
    }
}

/// LeNet-shaped teacher for classification (two 5x5 conv stages and a dense
/// head), or a small fully convolutional teacher for segmentation.
pub fn teacher_spec(cfg: &RunConfig, input: Dims) -> Result<NetworkSpec> {
    let Dims::Chw { c, h, w } = input else {
        return Err(Error::InvalidSpec("teacher input must be an image".into()));
    };
    match task_of(cfg) {
        Task::Classification => {
            if h < 9 || w < 9 {
                return Err(Error::InvalidSpec("teacher needs at least 9x9 images".into()));
            }
            let (h2, w2) = (h - 4, w - 4);
            let (h3, w3) = (h2 - 4, w2 - 4);
            Ok(NetworkSpec::new(
                vec![
                    LayerSpec::conv2d_biased(c, 6, 5, Padding::Valid),
                    LayerSpec::Relu,
                    LayerSpec::conv2d_biased(6, 16, 5, Padding::Valid),
                    LayerSpec::Relu,
                    LayerSpec::Flatten,
                    LayerSpec::dense(16 * h3 * w3, cfg.teacher_hidden),
                    LayerSpec::Relu,
                    LayerSpec::dense(cfg.teacher_hidden, 10),
                ],
                Parameterization::Standard,
                0,
            ))
        }
        Task::Segmentation => Ok(NetworkSpec::new(
            vec![
                LayerSpec::conv2d_biased(c, 8, 3, Padding::Same),
                LayerSpec::Relu,
                LayerSpec::conv2d_biased(8, 8, 3, Padding::Same),
                LayerSpec::Relu,
                LayerSpec::conv2d_biased(8, 1, 3, Padding::Same),
            ],
            Parameterization::Standard,
            0,
        )),
    }
}

fn optimizer_hyper(cfg: &RunConfig, lr: f64) -> Result<OptimizerHyper> {
    let kind = match cfg.optimizer.as_str() {
        "sgd" => OptimizerKind::Sgd,
        "adam" => OptimizerKind::adam(),
        other => {
            return Err(Error::Config(format!(
                "optimizer must be sgd or adam, got {other:?}"
            )))
        }
    };
    Ok(OptimizerHyper { kind, lr })
}

fn parse_strategy(raw: &str) -> Result<Strategy> {
    match raw {
        "e2e" => Ok(Strategy::E2e),
        "kd" => Ok(Strategy::Kd),
        "ntkd" => Ok(Strategy::Ntkd),
        other => Err(Error::Config(format!(
            "strategy must be e2e, kd, or ntkd, got {other:?}"
        ))),
    }
}

fn parse_normalization(raw: &str) -> Result<NtkNormalization> {
    match raw {
        "trace" => Ok(NtkNormalization::Trace),
        "frobenius" => Ok(NtkNormalization::Frobenius),
        "none" => Ok(NtkNormalization::None),
        other => Err(Error::Config(format!(
            "ntk_normalization must be trace, frobenius, or none, got {other:?}"
        ))),
    }
}

fn loss_kind_of(task: Task) -> LossKind {
    match task {
        Task::Classification => LossKind::CrossEntropy,
        Task::Segmentation => LossKind::Mse,
    }
}

/// Builds the student TrainConfig from the merged config.
pub fn train_config(cfg: &RunConfig) -> Result<TrainConfig> {
    let strategy = parse_strategy(&cfg.strategy)?;
    let batch_size = if matches!(strategy, Strategy::Ntkd) {
        cfg.ntkd_batch_size
    } else {
        cfg.batch_size
    };
    Ok(TrainConfig {
        strategy,
        alpha: cfg.alpha,
        beta: cfg.beta,
        kd_temperature: cfg.temperature,
        epochs: cfg.epochs,
        batch_size,
        seed: cfg.seed,
        optimizer: optimizer_hyper(cfg, cfg.lr)?,
        ntk_normalization: parse_normalization(&cfg.ntk_normalization)?,
        loss_kind: loss_kind_of(task_of(cfg)),
    })
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

pub fn stage_design(cfg: &RunConfig) -> Result<LayoutResult> {
    let dir = prepare_out(cfg)?;
    let design = frontend_design(cfg)?;
    let layout = compute_layout(&design)?;
    let record = json!({
        "design": design,
        "n_cols": layout.n_cols,
        "n_rows": layout.n_rows,
        "n_kernels": layout.n_kernels,
        "centers_mm": layout.centers_mm,
    });
    fs::write(dir.join("design.json"), serde_json::to_string_pretty(&record)?.as_bytes())?;
    Ok(layout)
}

pub fn stage_estimate(cfg: &RunConfig) -> Result<EstimateReport> {
    let dir = prepare_out(cfg)?;
    if task_of(cfg) != Task::Classification {
        return Err(Error::Config(
            "estimate supports classification datasets".into(),
        ));
    }
    let (train, test) = load_datasets(cfg)?;
    let train = train
        .shuffled(derive(cfg.seed, "estimate-train"))
        .take(cfg.estimate_train_n.min(train.len()), "estimate-train");
    let test = test
        .shuffled(derive(cfg.seed, "estimate-test"))
        .take(cfg.estimate_test_n.min(test.len()), "estimate-test");
    let setup = RegressionSetup {
        lambda_grid: cfg.parse_f64_list("lambda_grid", &cfg.lambda_grid)?,
        ..Default::default()
    };
    let n = train.images.batch_size();
    let d = train.images.sample_len();
    let flat_train = train.images.clone().reshaped(vec![n, d])?;
    let flat_test = test
        .images
        .clone()
        .reshaped(vec![test.images.batch_size(), d])?;
    let report = estimate_performance(
        &ReferenceKernel::AnalyticFc {
            depth: cfg.reference_depth,
        },
        &flat_train,
        train.class_labels()?,
        &flat_test,
        test.class_labels()?,
        10,
        &setup,
        cfg.val_fraction,
    )?;
    fs::write(
        dir.join("estimate.json"),
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;
    Ok(report)
}

pub fn stage_pretrain_teacher(cfg: &RunConfig) -> Result<f64> {
    let dir = prepare_out(cfg)?;
    let (train, test) = load_datasets(cfg)?;
    let input = Dims::of_batch(&train.images)?;
    let spec = teacher_spec(cfg, input)?;
    let tcfg = TrainConfig {
        strategy: Strategy::E2e,
        alpha: 1.0,
        beta: 0.0,
        kd_temperature: cfg.temperature,
        epochs: cfg.teacher_epochs,
        batch_size: cfg.teacher_batch_size,
        seed: derive(cfg.seed, "teacher"),
        optimizer: optimizer_hyper(cfg, cfg.teacher_lr)?,
        ntk_normalization: NtkNormalization::Trace,
        loss_kind: loss_kind_of(task_of(cfg)),
    };
    let (teacher, report) = pretrain_teacher(&spec, &train, &test, &tcfg)?;
    ckpt::save_network(&teacher.network, &ckpt_path(cfg, &cfg.teacher_ckpt, "teacher.ckpt"))?;
    fs::write(dir.join("teacher-metrics.csv"), report.metrics_csv())?;
    Ok(teacher.reported_metric)
}

fn load_teacher(cfg: &RunConfig) -> Result<TeacherHandle> {
    let path = ckpt_path(cfg, &cfg.teacher_ckpt, "teacher.ckpt");
    require_artifact(&path, "pretrain-teacher")?;
    let network = ckpt::load_network(&path)?;
    Ok(TeacherHandle {
        network,
        task: task_of(cfg),
        reported_metric: f64::NAN,
    })
}

pub fn stage_train(cfg: &RunConfig) -> Result<f64> {
    let dir = prepare_out(cfg)?;
    let (train, test) = load_datasets(cfg)?;
    let layout = compute_layout(&frontend_design(cfg)?)?;
    let input = Dims::of_batch(&train.images)?;
    let spec = student_spec(cfg, &layout, input)?;
    let student = crate::net::build_network(&spec, derive(cfg.seed, "student-init"))?;
    let tcfg = train_config(cfg)?;
    let needs_teacher = !matches!(tcfg.strategy, Strategy::E2e) && tcfg.beta > 0.0;
    let (net, report) = if needs_teacher {
        let teacher = load_teacher(cfg)?;
        train_student(student, &teacher, &train, &test, &tcfg)?
    } else {
        let job = TrainJob {
            student_inputs: &train.images,
            teacher_inputs: None,
            targets: &train.targets,
            test_inputs: &test.images,
            test_targets: &test.targets,
            scope: ParamScope::All,
        };
        run_training(student, None, &job, &tcfg)?
    };
    ckpt::save_network(&net, &ckpt_path(cfg, &cfg.student_ckpt, "student.ckpt"))?;
    fs::write(dir.join("train-metrics.csv"), report.metrics_csv())?;
    fs::write(
        dir.join("train-report.json"),
        serde_json::to_string_pretty(&report.final_eval)?.as_bytes(),
    )?;
    Ok(report.final_metric())
}

fn noise_from_cfg(cfg: &RunConfig) -> FabricationNoiseSpec {
    FabricationNoiseSpec {
        alpha_cal: cfg.alpha_cal,
        beta_cal: cfg.beta_cal,
        shift_x: cfg.shift_x,
        shift_y: cfg.shift_y,
        delta_sigma: cfg.delta_sigma,
        epsilon_sigma: cfg.epsilon_sigma,
        seed: cfg.fabrication_seed,
    }
}

/// Extracts the frontend conv kernels of a trained student.
fn frontend_kernels(student: &Network) -> Result<crate::tensor::Tensor> {
    let idx = student
        .scoped_param_indices(&ParamScope::Frontend)
        .into_iter()
        .next()
        .ok_or_else(|| Error::InvalidSpec("student has no frontend parameters".into()))?;
    Ok(student.params()[idx].clone())
}

pub fn stage_fabricate(cfg: &RunConfig) -> Result<PathBuf> {
    prepare_out(cfg)?;
    let student_path = ckpt_path(cfg, &cfg.student_ckpt, "student.ckpt");
    require_artifact(&student_path, "train")?;
    let student = ckpt::load_network(&student_path)?;
    let kernels = frontend_kernels(&student)?;
    let frontend = fabricate(&kernels, noise_from_cfg(cfg))?;
    let path = ckpt_path(cfg, &cfg.frontend_ckpt, "frontend.ckpt");
    frontend.save(&path)?;
    Ok(path)
}

pub fn stage_calibrate(cfg: &RunConfig) -> Result<crate::optics::Calibration> {
    let dir = prepare_out(cfg)?;
    let frontend_path = ckpt_path(cfg, &cfg.frontend_ckpt, "frontend.ckpt");
    require_artifact(&frontend_path, "fabricate")?;
    let frontend = FabricatedFrontend::load(&frontend_path)?;
    let (_, test) = load_datasets(cfg)?;
    let probe_n = test.len().min(16);
    let probe = test.take(probe_n, "calibration-probe");
    let mut rng = rng_from_seed(derive(cfg.seed, "calibrate-capture"));
    let measured = frontend.capture(&probe.images, &mut rng)?;
    let simulated = frontend.simulate_ideal(&probe.images)?;
    let cal = calibrate(&measured, &simulated)?;
    fs::write(
        dir.join("calibration.json"),
        serde_json::to_string_pretty(&cal)?.as_bytes(),
    )?;
    Ok(cal)
}

pub fn stage_compensate(cfg: &RunConfig) -> Result<f64> {
    let dir = prepare_out(cfg)?;
    let student_path = ckpt_path(cfg, &cfg.student_ckpt, "student.ckpt");
    require_artifact(&student_path, "train")?;
    let frontend_path = ckpt_path(cfg, &cfg.frontend_ckpt, "frontend.ckpt");
    require_artifact(&frontend_path, "fabricate")?;
    let student = ckpt::load_network(&student_path)?;
    let frontend = FabricatedFrontend::load(&frontend_path)?;
    let (train, test) = load_datasets(cfg)?;
    let strategy = parse_strategy(&cfg.compensate_strategy)?;
    let ccfg = TrainConfig {
        strategy,
        alpha: cfg.alpha,
        beta: cfg.beta,
        kd_temperature: cfg.temperature,
        epochs: cfg.compensate_epochs,
        batch_size: if matches!(strategy, Strategy::Ntkd) {
            cfg.ntkd_batch_size
        } else {
            cfg.batch_size
        },
        seed: derive(cfg.seed, "compensate"),
        optimizer: optimizer_hyper(cfg, cfg.compensate_lr)?,
        ntk_normalization: parse_normalization(&cfg.ntk_normalization)?,
        loss_kind: loss_kind_of(task_of(cfg)),
    };
    let teacher = if matches!(strategy, Strategy::E2e) {
        None
    } else {
        Some(load_teacher(cfg)?)
    };
    let outcome = compensate(
        &student,
        &frontend,
        teacher.as_ref(),
        &train,
        &test,
        cfg.dataset_fraction,
        &ccfg,
    )?;
    ckpt::save_network(&outcome.student, &dir.join("compensated.ckpt"))?;
    fs::write(dir.join("compensate-metrics.csv"), outcome.report.metrics_csv())?;
    let record = json!({
        "simulated_metric": outcome.simulated_eval.metric,
        "baseline_metric": outcome.baseline_eval.metric,
        "final_metric": outcome.report.final_metric(),
    });
    fs::write(
        dir.join("compensate-report.json"),
        serde_json::to_string_pretty(&record)?.as_bytes(),
    )?;
    Ok(outcome.report.final_metric())
}

pub fn stage_eval(cfg: &RunConfig) -> Result<f64> {
    let dir = prepare_out(cfg)?;
    let path = ckpt_path(cfg, &cfg.eval_ckpt, "student.ckpt");
    require_artifact(&path, "train")?;
    let net = ckpt::load_network(&path)?;
    let (_, test) = load_datasets(cfg)?;
    let sim = eval_network(&net, &test.images, &test.targets)?;
    let mut record = json!({
        "checkpoint": path.display().to_string(),
        "simulation": sim,
    });
    let frontend_path = ckpt_path(cfg, &cfg.frontend_ckpt, "frontend.ckpt");
    if frontend_path.exists() && net.spec().frontend_split > 0 {
        let frontend = FabricatedFrontend::load(&frontend_path)?;
        let mut rng = rng_from_seed(derive(cfg.seed, "eval-capture"));
        let captured = frontend.capture(&test.images, &mut rng)?;
        let backend = net.backend_network()?;
        let hw = eval_network(&backend, &captured, &test.targets)?;
        record["hardware"] = serde_json::to_value(&hw)?;
    }
    fs::write(
        dir.join("eval.json"),
        serde_json::to_string_pretty(&record)?.as_bytes(),
    )?;
    Ok(sim.metric)
}

/// One arm of the random-frontend ablation: frozen random kernels, a single
/// dense readout trained end-to-end on the captured features.
pub fn ablation_arm(
    n_kernels: usize,
    kernel_px: usize,
    train: &LabeledDataset,
    test: &LabeledDataset,
    epochs: usize,
    lr: f64,
    nonnegative: bool,
    seed: u64,
) -> Result<f64> {
    let channels = train.images.shape()[1];
    let frontend = random_frontend(n_kernels, kernel_px, channels, seed, nonnegative)?;
    let mut rng = rng_from_seed(derive(seed, "ablate-capture"));
    let feat_train = frontend.capture(&train.images, &mut rng)?;
    let feat_test = frontend.capture(&test.images, &mut rng)?;
    let d = feat_train.sample_len();
    let spec = NetworkSpec::new(
        vec![LayerSpec::Flatten, LayerSpec::dense(d, 10)],
        Parameterization::Standard,
        0,
    );
    let backend = crate::net::build_network(&spec, derive(seed, "ablate-backend"))?;
    let tcfg = TrainConfig {
        strategy: Strategy::E2e,
        alpha: 1.0,
        beta: 0.0,
        kd_temperature: 4.0,
        epochs,
        batch_size: 32,
        seed: derive(seed, "ablate-train"),
        optimizer: OptimizerHyper {
            kind: OptimizerKind::adam(),
            lr,
        },
        ntk_normalization: NtkNormalization::Trace,
        loss_kind: LossKind::CrossEntropy,
    };
    let job = TrainJob {
        student_inputs: &feat_train,
        teacher_inputs: None,
        targets: &train.targets,
        test_inputs: &feat_test,
        test_targets: &test.targets,
        scope: ParamScope::All,
    };
    let (_, report) = run_training(backend, None, &job, &tcfg)?;
    Ok(report.final_metric())
}

pub fn stage_ablate(cfg: &RunConfig) -> Result<Vec<(String, f64)>> {
    let dir = prepare_out(cfg)?;
    if task_of(cfg) != Task::Classification {
        return Err(Error::Config("ablate-random supports classification".into()));
    }
    let (train, test) = load_datasets(cfg)?;
    let ks = cfg.parse_usize_list("ablate_kernels", &cfg.ablate_kernels)?;
    let mut rows: Vec<(String, f64)> = Vec::new();
    for &k in &ks {
        let acc = ablation_arm(
            k,
            cfg.kernel_px,
            &train,
            &test,
            cfg.ablate_epochs,
            cfg.lr,
            cfg.ablate_nonnegative,
            derive(cfg.seed, &format!("ablate-{k}")),
        )?;
        rows.push((k.to_string(), acc));
    }
    // Infinite-kernel regime: kernel regression with the closed-form limit
    // of the linear conv student.
    let setup = RegressionSetup {
        lambda_grid: cfg.parse_f64_list("lambda_grid", &cfg.lambda_grid)?,
        ..Default::default()
    };
    let reference = ReferenceKernel::LinearConv(crate::ntk::LinearConvShape {
        kernel_px: cfg.kernel_px,
        n_outputs: 10,
    });
    let est = estimate_performance(
        &reference,
        &train.images,
        train.class_labels()?,
        &test.images,
        test.class_labels()?,
        10,
        &setup,
        cfg.val_fraction,
    )?;
    rows.push(("inf".to_string(), est.test_metric));

    let mut csv = String::from("kernels,accuracy\n");
    for (k, acc) in &rows {
        writeln!(csv, "{k},{acc:.6}").unwrap();
    }
    fs::write(dir.join("ablation.csv"), csv)?;
    Ok(rows)
}

pub fn stage_analyze_spectrum(cfg: &RunConfig) -> Result<crate::ntk::SpectrumReport> {
    let dir = prepare_out(cfg)?;
    let teacher = load_teacher(cfg)?;
    let (_, test) = load_datasets(cfg)?;
    let probe_n = test.len().min(200);
    let probe = test.take(probe_n, "spectrum-probe");
    let conv_layers: Vec<usize> = teacher
        .network
        .spec()
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, LayerSpec::Conv2d { .. }))
        .map(|(i, _)| i)
        .collect();
    if conv_layers.is_empty() {
        return Err(Error::InvalidSpec("teacher has no conv layers to analyze".into()));
    }
    let j = teacher.network.per_sample_jacobian(
        &probe.images,
        Scalarization::SumOutputs,
        &ParamScope::Layers(conv_layers),
    )?;
    let report = gram_spectrum(&j)?;
    let mut csv = String::from("eigenindex,eigenvalue,cumulative\n");
    for (i, (ev, cum)) in report
        .eigenvalues
        .iter()
        .zip(&report.cumulative_power)
        .enumerate()
    {
        writeln!(csv, "{i},{ev:.12e},{cum:.9}").unwrap();
    }
    fs::write(dir.join("spectrum.csv"), csv)?;
    Ok(report)
}

pub fn stage_analyze_ntk_scaling(cfg: &RunConfig) -> Result<crate::ntk::PerturbationReport> {
    let dir = prepare_out(cfg)?;
    let widths = cfg.parse_usize_list("widths", &cfg.widths)?;
    let report = ntk_perturbation_experiment(
        &widths,
        cfg.delta_norm,
        cfg.n_trials,
        derive(cfg.seed, "ntk-scaling"),
    )?;
    let mut csv = String::from("m,mean_dtheta,std\n");
    for w in &report.per_width {
        writeln!(csv, "{},{:.12e},{:.12e}", w.width, w.mean_delta_theta, w.std_delta_theta).unwrap();
    }
    fs::write(dir.join("ntk-scaling.csv"), csv)?;
    fs::write(
        dir.join("ntk-scaling.json"),
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;
    Ok(report)
}

pub fn stage_analyze_macs(cfg: &RunConfig) -> Result<(u64, u64, f64)> {
    let dir = prepare_out(cfg)?;
    let (train, _) = load_datasets(cfg)?;
    let layout = compute_layout(&frontend_design(cfg)?)?;
    let input = Dims::of_batch(&train.images)?;
    let spec = student_spec(cfg, &layout, input)?;
    let full = mac_count(&spec, input, MacScope::Full)?;
    let backend = mac_count(&spec, input, MacScope::BackendOnly)?;
    let model = CostModel::default();
    let energy = energy_estimate(backend, 1, &model)?;
    let record = json!({
        "full_macs": full,
        "backend_macs": backend,
        "hybrid_energy_j": energy,
        "full_digital_energy_j": energy_estimate(full, 1, &model)?,
        "cost_model": model,
    });
    fs::write(dir.join("macs.json"), serde_json::to_string_pretty(&record)?.as_bytes())?;
    Ok((full, backend, energy))
}

pub fn stage_export_features(cfg: &RunConfig) -> Result<usize> {
    let dir = prepare_out(cfg)?;
    let path = ckpt_path(cfg, &cfg.eval_ckpt, "student.ckpt");
    require_artifact(&path, "train")?;
    let net = ckpt::load_network(&path)?;
    let (_, test) = load_datasets(cfg)?;
    export_features(&net, None, &test, &dir.join("features.csv"), cfg.seed)
}

/// Runs the full chain: design, estimate, pretrain-teacher, train,
/// fabricate, calibrate, compensate, analyses, eval, export.
pub fn run_pipeline(cfg: &RunConfig) -> Result<Vec<(String, String)>> {
    let mut log: Vec<(String, String)> = Vec::new();
    let layout = stage_design(cfg)?;
    log.push(("design".into(), format!("{} kernels ({}x{})", layout.n_kernels, layout.n_cols, layout.n_rows)));
    if task_of(cfg) == Task::Classification {
        let est = stage_estimate(cfg)?;
        log.push(("estimate".into(), format!("test metric {:.4}", est.test_metric)));
    }
    let teacher_metric = stage_pretrain_teacher(cfg)?;
    log.push(("pretrain-teacher".into(), format!("test metric {teacher_metric:.4}")));
    let student_metric = stage_train(cfg)?;
    log.push(("train".into(), format!("test metric {student_metric:.4}")));
    let frontend_path = stage_fabricate(cfg)?;
    log.push(("fabricate".into(), format!("wrote {}", frontend_path.display())));
    let cal = stage_calibrate(cfg)?;
    log.push((
        "calibrate".into(),
        format!("gain {:.4}, shift ({}, {})", cal.gain, cal.shift_x, cal.shift_y),
    ));
    let comp_metric = stage_compensate(cfg)?;
    log.push(("compensate".into(), format!("test metric {comp_metric:.4}")));
    if task_of(cfg) == Task::Classification {
        let spectrum = stage_analyze_spectrum(cfg)?;
        log.push((
            "analyze spectrum".into(),
            format!("count_at(0.95) = {}", spectrum.count_at(0.95)),
        ));
    }
    let scaling = stage_analyze_ntk_scaling(cfg)?;
    log.push(("analyze ntk-scaling".into(), format!("slope {:.3}", scaling.slope)));
    let (full, backend, energy) = stage_analyze_macs(cfg)?;
    log.push((
        "analyze macs".into(),
        format!("{full} MACs full, {backend} backend, {energy:.3e} J hybrid"),
    ));
    let eval_metric = stage_eval(cfg)?;
    log.push(("eval".into(), format!("test metric {eval_metric:.4}")));
    if task_of(cfg) == Task::Classification {
        let rows = stage_export_features(cfg)?;
        log.push(("export-features".into(), format!("{rows} rows")));
    }
    Ok(log)
}
