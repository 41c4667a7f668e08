//! Post-fabrication error compensation: retrain only the digital backend on
//! feature maps captured through the fixed optical frontend, using a small
//! fraction of the data. The teacher keeps seeing raw images; the student
//! kernel is computed on the backend given captured maps.

use super::FabricatedFrontend;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::net::{Network, ParamScope};
use crate::rng::{derive, rng_from_seed};
use crate::train::{eval_network, run_training, TeacherHandle, TrainConfig, TrainJob, TrainReport};

#[derive(Debug)]
pub struct CompensationOutcome {
    /// Full student with retrained backend; frontend tensors byte-identical.
    pub student: Network,
    pub report: TrainReport,
    /// Accuracy of the uncompensated student on captured test data.
    pub baseline_eval: EvalReport,
    /// Accuracy of the same student in ideal simulation, for the drop.
    pub simulated_eval: EvalReport,
}

/// Retrains the backend of `student` on captured feature maps of a
/// `dataset_fraction` subset. Strategies `e2e` and `ntkd` are both
/// supported; the frontend parameters are never touched.
pub fn compensate(
    student: &Network,
    frontend: &FabricatedFrontend,
    teacher: Option<&TeacherHandle>,
    train: &LabeledDataset,
    test: &LabeledDataset,
    dataset_fraction: f64,
    config: &TrainConfig,
) -> Result<CompensationOutcome> {
    if !(dataset_fraction > 0.0 && dataset_fraction <= 1.0) {
        return Err(Error::InvalidSpec(format!(
            "dataset_fraction must be in (0, 1], got {dataset_fraction}"
        )));
    }
    if student.spec().frontend_split == 0 {
        return Err(Error::InvalidSpec(
            "student has no optical frontend to compensate for".into(),
        ));
    }

    let n_sub = ((train.len() as f64 * dataset_fraction).round() as usize).clamp(1, train.len());
    let subset = train.take(n_sub, "compensation");

    // The captured maps are the measurements: one shot per sample, frozen
    // for training; the test set is captured with its own noise stream.
    let mut cap_rng = rng_from_seed(derive(config.seed, "compensate-capture-train"));
    let captured_train = frontend.capture(&subset.images, &mut cap_rng)?;
    let mut test_rng = rng_from_seed(derive(config.seed, "compensate-capture-test"));
    let captured_test = frontend.capture(&test.images, &mut test_rng)?;

    let backend = student.backend_network()?;
    let baseline_eval = eval_network(&backend, &captured_test, &test.targets)?;
    let simulated_eval = eval_network(student, &test.images, &test.targets)?;

    let job = TrainJob {
        student_inputs: &captured_train,
        teacher_inputs: Some(&subset.images),
        targets: &subset.targets,
        test_inputs: &captured_test,
        test_targets: &test.targets,
        scope: ParamScope::All, // all backend-net params are backend params
    };
    let (trained_backend, report) =
        run_training(backend, teacher.map(|t| &t.network), &job, config)?;

    let mut updated = student.clone();
    updated.adopt_backend(&trained_backend)?;
    Ok(CompensationOutcome {
        student: updated,
        report,
        baseline_eval,
        simulated_eval,
    })
}
