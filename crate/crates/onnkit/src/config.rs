//! Run configuration: a flat `key = value` text format with a closed key
//! set. Unknown keys fail loudly with a nearest-key suggestion, and every
//! run writes a resolved snapshot of all effective values.

use crate::error::{Error, Result};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

macro_rules! config_keys {
    ($( $field:ident : $ty:ty = $default:expr, $doc:expr; )*) => {
        /// Merged view of every stage's configuration.
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $( pub $field: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $( $field: $default, )* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [(&'static str, &'static str)] = &[
                $( (stringify!($field), $doc), )*
            ];

            /// Applies one `key = value` assignment.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($field) => {
                        self.$field = parse_value::<$ty>(key, value)?;
                        Ok(())
                    } )*
                    _ => Err(unknown_key(key)),
                }
            }

            /// All effective values, one `key = value` line each.
            pub fn resolved(&self) -> String {
                let mut out = String::new();
                $( writeln!(out, "{} = {}", stringify!($field), display_value(&self.$field)).unwrap(); )*
                out
            }
        }
    };
}

fn parse_value<T: FromConfig>(key: &str, value: &str) -> Result<T> {
    T::from_config(value)
        .ok_or_else(|| Error::Config(format!("invalid value {value:?} for key {key}")))
}

trait FromConfig: Sized {
    fn from_config(s: &str) -> Option<Self>;
}

impl FromConfig for u64 {
    fn from_config(s: &str) -> Option<Self> {
        s.parse().ok()
    }
}
impl FromConfig for usize {
    fn from_config(s: &str) -> Option<Self> {
        s.parse().ok()
    }
}
impl FromConfig for i64 {
    fn from_config(s: &str) -> Option<Self> {
        s.parse().ok()
    }
}
impl FromConfig for f64 {
    fn from_config(s: &str) -> Option<Self> {
        s.parse().ok()
    }
}
impl FromConfig for bool {
    fn from_config(s: &str) -> Option<Self> {
        match s {
            "true" | "1" | "yes" => Some(true),
            "false" | "0" | "no" => Some(false),
            _ => None,
        }
    }
}
impl FromConfig for String {
    fn from_config(s: &str) -> Option<Self> {
        Some(s.to_string())
    }
}

fn display_value<T: std::fmt::Display>(v: &T) -> String {
    v.to_string()
}

config_keys! {
    // global
    seed: u64 = 0, "global random seed";
    threads: usize = 0, "worker threads; 0 = all cores, 1 implies deterministic";
    deterministic: bool = false, "force single-threaded deterministic execution";
    out_dir: String = "out".into(), "output directory for stage artifacts";

    // dataset
    dataset: String = "synthetic_digits".into(), "one of: mnist, cifar10, synthetic_digits, synthetic_seg";
    mnist_train_images: String = String::new(), "path to train-images-idx3-ubyte";
    mnist_train_labels: String = String::new(), "path to train-labels-idx1-ubyte";
    mnist_test_images: String = String::new(), "path to t10k-images-idx3-ubyte";
    mnist_test_labels: String = String::new(), "path to t10k-labels-idx1-ubyte";
    cifar_train: String = String::new(), "semicolon-separated CIFAR-10 training batch paths";
    cifar_test: String = String::new(), "semicolon-separated CIFAR-10 test batch paths";
    synth_train_n: usize = 2000, "synthetic dataset training size";
    synth_test_n: usize = 500, "synthetic dataset test size";
    synth_seed: u64 = 1, "synthetic dataset generator seed";
    synth_resolution: usize = 64, "synthetic segmentation resolution";
    train_n: usize = 0, "training subset size (0 = all)";
    test_n: usize = 0, "test subset size (0 = all)";

    // frontend design
    surface_h_mm: f64 = 7.0, "metasurface height in mm";
    surface_w_mm: f64 = 13.0, "metasurface width in mm";
    kernel_size_mm: f64 = 2.0, "physical kernel side length in mm";
    min_spacing_mm: f64 = 1.0, "minimum kernel spacing in mm";
    kernel_px: usize = 7, "digital kernel resolution (odd)";
    channels: String = "mono".into(), "mono or rgb";
    backend_hidden: usize = 16, "hidden width of the classification backend (0 = single layer)";

    // teacher
    teacher_hidden: usize = 32, "hidden width of the LeNet-like teacher head";
    teacher_epochs: usize = 5, "teacher pretraining epochs";
    teacher_lr: f64 = 1e-3, "teacher learning rate";
    teacher_batch_size: usize = 32, "teacher batch size";

    // student training
    strategy: String = "ntkd".into(), "training strategy: e2e, kd, or ntkd";
    alpha: f64 = 1.0, "weight of the supervised loss";
    beta: f64 = 1.0, "weight of the transfer loss";
    temperature: f64 = 4.0, "kd softmax temperature";
    epochs: usize = 8, "student training epochs";
    batch_size: usize = 32, "student batch size (ntkd uses ntkd_batch_size)";
    ntkd_batch_size: usize = 8, "batch size when strategy = ntkd";
    lr: f64 = 1e-3, "student learning rate";
    optimizer: String = "adam".into(), "sgd or adam";
    ntk_normalization: String = "trace".into(), "kernel normalization: trace, frobenius, none";

    // performance estimation
    reference_depth: usize = 3, "hidden depth of the FC reference kernel";
    estimate_train_n: usize = 1000, "training samples for the estimate";
    estimate_test_n: usize = 500, "test samples for the estimate";
    lambda_grid: String = "1e-6,1e-4,1e-2,1,100".into(), "relative ridge grid (scaled by trace/n)";
    val_fraction: f64 = 0.2, "validation fraction for lambda selection";

    // fabrication noise
    alpha_cal: f64 = 1.0, "brightness scale of the fabricated system";
    beta_cal: f64 = 1.0, "misalignment attenuation of the fabricated system";
    shift_x: i64 = 0, "misalignment shift in x (pixels)";
    shift_y: i64 = 0, "misalignment shift in y (pixels)";
    delta_sigma: f64 = 0.0, "kernel perturbation std relative to kernel rms";
    epsilon_sigma: f64 = 0.0, "sensor noise std relative to output rms";
    fabrication_seed: u64 = 0, "seed of the frozen fabrication draw";

    // compensation
    dataset_fraction: f64 = 0.1, "fraction of training data captured for compensation";
    compensate_epochs: usize = 6, "compensation epochs";
    compensate_strategy: String = "ntkd".into(), "compensation strategy: e2e or ntkd";
    compensate_lr: f64 = 1e-3, "compensation learning rate";

    // random-frontend ablation
    ablate_kernels: String = "8,64,256".into(), "kernel counts for the random-PSF ablation";
    ablate_nonnegative: bool = false, "fold random kernels to nonnegative intensities";
    ablate_epochs: usize = 6, "backend training epochs per ablation arm";

    // kernel perturbation analysis
    widths: String = "16,64,256,1024".into(), "widths for the perturbation scaling experiment";
    delta_norm: f64 = 0.5, "perturbation norm for the scaling experiment";
    n_trials: usize = 20, "trials per width";

    // checkpoints (empty = default path under out_dir)
    teacher_ckpt: String = String::new(), "teacher checkpoint path";
    student_ckpt: String = String::new(), "student checkpoint path";
    frontend_ckpt: String = String::new(), "fabricated frontend checkpoint path";
    eval_ckpt: String = String::new(), "checkpoint evaluated by the eval stage";
}

fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.iter().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

fn unknown_key(key: &str) -> Error {
    let nearest = RunConfig::KEYS
        .iter()
        .min_by_key(|(k, _)| levenshtein(key, k))
        .map(|(k, _)| *k)
        .unwrap_or("seed");
    Error::Config(format!(
        "unknown config key {key:?}; did you mean {nearest:?}?"
    ))
}

impl RunConfig {
    /// Parses a flat `key = value` file. Blank lines and `#` comments are
    /// allowed; unknown keys are errors, not warnings.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got {raw:?}", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Applies `--set key=value` overrides (highest precedence).
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (key, value) = o.split_once('=').ok_or_else(|| {
                Error::Config(format!("override {o:?} must look like key=value"))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Comma-separated list helpers.
    pub fn parse_usize_list(&self, key: &str, raw: &str) -> Result<Vec<usize>> {
        raw.split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad entry {s:?} in {key}")))
            })
            .collect()
    }

    pub fn parse_f64_list(&self, key: &str, raw: &str) -> Result<Vec<f64>> {
        raw.split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad entry {s:?} in {key}")))
            })
            .collect()
    }
}
