//! Simulated optical capture: ideal PSF convolution, fabrication noise,
//! calibration, and backend-only error compensation.
//!
//! The noise model for a measured feature map is
//! `y = alpha * beta * (shift(a) * (k + delta)) + epsilon`, with `delta`
//! drawn once at fabrication time and frozen, and `epsilon` redrawn on
//! every capture.

mod calibrate;
mod compensate;

pub use calibrate::{calibrate, Calibration};
pub use compensate::{compensate, CompensationOutcome};

use crate::ckpt;
use crate::error::{Error, Result};
use crate::net::layers::{conv2d_fwd, ConvGeom};
use crate::rng::{derive, rng_from_seed, Rng};
use crate::tensor::Tensor;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FabricationNoiseSpec {
    /// Brightness scale.
    pub alpha_cal: f64,
    /// Misalignment attenuation (scalar part).
    pub beta_cal: f64,
    /// Integer misalignment realization in pixels.
    pub shift_x: i64,
    pub shift_y: i64,
    /// Kernel perturbation std, relative to the RMS of the ideal kernels.
    pub delta_sigma: f64,
    /// Sensor noise std, relative to the RMS of the ideal output.
    pub epsilon_sigma: f64,
    pub seed: u64,
}

impl FabricationNoiseSpec {
    pub fn neutral() -> Self {
        Self {
            alpha_cal: 1.0,
            beta_cal: 1.0,
            shift_x: 0,
            shift_y: 0,
            delta_sigma: 0.0,
            epsilon_sigma: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha_cal <= 0.0 || self.beta_cal <= 0.0 {
            return Err(Error::InvalidSpec("alpha_cal and beta_cal must be positive".into()));
        }
        if self.delta_sigma < 0.0 || self.epsilon_sigma < 0.0 {
            return Err(Error::InvalidSpec("noise sigmas must be non-negative".into()));
        }
        Ok(())
    }

    pub fn is_neutral(&self) -> bool {
        self.alpha_cal == 1.0
            && self.beta_cal == 1.0
            && self.shift_x == 0
            && self.shift_y == 0
            && self.delta_sigma == 0.0
            && self.epsilon_sigma == 0.0
    }
}

/// Ideal optical convolution: valid padding, stride 1, no bias. Kernels are
/// `[m, c, k, k]`; a polychromatic kernel holds one plane per color channel
/// and the sensor sums them into one map.
pub fn optical_conv_ideal(images: &Tensor, kernels: &Tensor) -> Result<Tensor> {
    let &[n, ci, h, w] = images.shape() else {
        return Err(Error::ShapeMismatch {
            location: "optical_conv_ideal".into(),
            expected: "n x c x h x w images".into(),
            got: format!("{:?}", images.shape()),
        });
    };
    let &[m, kc, k, k2] = kernels.shape() else {
        return Err(Error::ShapeMismatch {
            location: "optical_conv_ideal".into(),
            expected: "m x c x k x k kernels".into(),
            got: format!("{:?}", kernels.shape()),
        });
    };
    if k != k2 || kc != ci {
        return Err(Error::ShapeMismatch {
            location: "optical_conv_ideal".into(),
            expected: format!("square kernels with {ci} channels"),
            got: format!("{:?}", kernels.shape()),
        });
    }
    if h < k || w < k {
        return Err(Error::ShapeMismatch {
            location: "optical_conv_ideal".into(),
            expected: format!("images at least {k} x {k}"),
            got: format!("{h} x {w}"),
        });
    }
    let (oh, ow) = (h - k + 1, w - k + 1);
    let g = ConvGeom {
        ci,
        co: m,
        k,
        h,
        w,
        oh,
        ow,
        pad: 0,
    };
    let mut out = vec![0.0; n * m * oh * ow];
    conv2d_fwd(images.data(), n, g, kernels.data(), 1.0, &mut out);
    Tensor::new(vec![n, m, oh, ow], out)
}

/// Shifts each channel plane by (shift_y, shift_x), zero-filling.
pub fn shift_images(images: &Tensor, shift_y: i64, shift_x: i64) -> Tensor {
    let shape = images.shape().to_vec();
    let (h, w) = (shape[2] as i64, shape[3] as i64);
    let planes: usize = shape[0] * shape[1];
    let src = images.data();
    let mut out = vec![0.0; src.len()];
    let plane = (h * w) as usize;
    for p in 0..planes {
        let s = &src[p * plane..(p + 1) * plane];
        let d = &mut out[p * plane..(p + 1) * plane];
        for y in 0..h {
            let sy = y - shift_y;
            if sy < 0 || sy >= h {
                continue;
            }
            for x in 0..w {
                let sx = x - shift_x;
                if sx < 0 || sx >= w {
                    continue;
                }
                d[(y * w + x) as usize] = s[(sy * w + sx) as usize];
            }
        }
    }
    Tensor::new(shape, out).unwrap()
}

/// An optical frontend after (simulated) fabrication. The realized kernels
/// are drawn once and never change; captures only add per-shot noise.
#[derive(Clone, Debug)]
pub struct FabricatedFrontend {
    ideal_kernels: Tensor,
    realized_kernels: Tensor,
    noise: FabricationNoiseSpec,
}

/// Draws the frozen kernel perturbation and fixes the frontend.
pub fn fabricate(kernels: &Tensor, noise: FabricationNoiseSpec) -> Result<FabricatedFrontend> {
    noise.validate()?;
    if kernels.shape().len() != 4 {
        return Err(Error::ShapeMismatch {
            location: "fabricate".into(),
            expected: "m x c x k x k kernels".into(),
            got: format!("{:?}", kernels.shape()),
        });
    }
    let mut realized = kernels.clone();
    if noise.delta_sigma > 0.0 {
        let std = noise.delta_sigma * kernels.rms();
        let mut rng = rng_from_seed(derive(noise.seed, "fabricate-delta"));
        for v in realized.data_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += z * std;
        }
    }
    Ok(FabricatedFrontend {
        ideal_kernels: kernels.clone(),
        realized_kernels: realized,
        noise,
    })
}

/// Random optical kernels with neutral noise, for the random-PSF ablation.
/// Nonnegative mode folds the draws to model PSF intensities.
pub fn random_frontend(
    n_kernels: usize,
    kernel_px: usize,
    channels: usize,
    seed: u64,
    nonnegative: bool,
) -> Result<FabricatedFrontend> {
    if n_kernels == 0 {
        return Err(Error::InvalidSpec("need at least one kernel".into()));
    }
    let mut rng = rng_from_seed(derive(seed, "random-frontend"));
    let kernels = Tensor::from_fn(&[n_kernels, channels, kernel_px, kernel_px], |_| {
        let z: f64 = rng.sample(StandardNormal);
        if nonnegative {
            z.abs()
        } else {
            z
        }
    });
    fabricate(&kernels, FabricationNoiseSpec::neutral())
}

impl FabricatedFrontend {
    pub fn ideal_kernels(&self) -> &Tensor {
        &self.ideal_kernels
    }

    pub fn realized_kernels(&self) -> &Tensor {
        &self.realized_kernels
    }

    pub fn noise(&self) -> &FabricationNoiseSpec {
        &self.noise
    }

    pub fn kernel_px(&self) -> usize {
        self.ideal_kernels.shape()[2]
    }

    pub fn n_kernels(&self) -> usize {
        self.ideal_kernels.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.ideal_kernels.shape()[1]
    }

    /// One measurement: shift, convolve with the realized kernels, apply the
    /// calibration gains, add fresh sensor noise. `rng` supplies the
    /// per-shot noise stream (epsilon is redrawn every capture).
    pub fn capture(&self, images: &Tensor, rng: &mut Rng) -> Result<Tensor> {
        let shifted = if self.noise.shift_x == 0 && self.noise.shift_y == 0 {
            images.clone()
        } else {
            shift_images(images, self.noise.shift_y, self.noise.shift_x)
        };
        let mut measured = optical_conv_ideal(&shifted, &self.realized_kernels)?;
        let gain = self.noise.alpha_cal * self.noise.beta_cal;
        if gain != 1.0 {
            measured.scale(gain);
        }
        if self.noise.epsilon_sigma > 0.0 {
            let ideal = optical_conv_ideal(images, &self.ideal_kernels)?;
            let std = self.noise.epsilon_sigma * ideal.rms();
            for v in measured.data_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += z * std;
            }
        }
        Ok(measured)
    }

    /// Simulated (noise-free) output of the designed system.
    pub fn simulate_ideal(&self, images: &Tensor) -> Result<Tensor> {
        optical_conv_ideal(images, &self.ideal_kernels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let n = &self.noise;
        let entries = vec![
            ("REALIZED.kernels".to_string(), self.realized_kernels.clone()),
            ("IDEAL.kernels".to_string(), self.ideal_kernels.clone()),
            (
                "NOISE.params".to_string(),
                Tensor::new(
                    vec![7],
                    vec![
                        n.alpha_cal,
                        n.beta_cal,
                        n.shift_x as f64,
                        n.shift_y as f64,
                        n.delta_sigma,
                        n.epsilon_sigma,
                        n.seed as f64,
                    ],
                )?,
            ),
        ];
        ckpt::save_tensors(&entries, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let entries = ckpt::load_tensors(path)?;
        let find = |name: &str| {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Data(format!("{}: missing {name}", path.display())))
        };
        let realized_kernels = find("REALIZED.kernels")?;
        let ideal_kernels = find("IDEAL.kernels")?;
        let p = find("NOISE.params")?;
        if p.len() != 7 {
            return Err(Error::Data("NOISE.params must have 7 entries".into()));
        }
        let d = p.data();
        Ok(Self {
            ideal_kernels,
            realized_kernels,
            noise: FabricationNoiseSpec {
                alpha_cal: d[0],
                beta_cal: d[1],
                shift_x: d[2] as i64,
                shift_y: d[3] as i64,
                delta_sigma: d[4],
                epsilon_sigma: d[5],
                seed: d[6] as u64,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_rng() -> Rng {
        rng_from_seed(1234)
    }

    #[test]
    fn delta_kernel_is_cropped_identity() {
        let img = Tensor::from_fn(&[1, 1, 5, 5], |i| i as f64);
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let kernels = Tensor::new(vec![1, 1, 3, 3], k).unwrap();
        let out = optical_conv_ideal(&img, &kernels).unwrap();
        for oy in 0..3 {
            for ox in 0..3 {
                assert_eq!(out.data()[oy * 3 + ox], img.data()[(oy + 1) * 5 + ox + 1]);
            }
        }
    }

    #[test]
    fn green_only_kernel_isolates_green_channel() {
        let img = Tensor::from_fn(&[1, 3, 4, 4], |i| (i % 16) as f64 + (i / 16) as f64 * 100.0);
        let mut kernels = Tensor::zeros(&[1, 3, 3, 3]);
        // Plane 1 (green) delta kernel.
        kernels.data_mut()[9 + 4] = 1.0;
        let out = optical_conv_ideal(&img, &kernels).unwrap();
        // Expect the cropped green channel.
        let green = Tensor::new(
            vec![1, 1, 4, 4],
            img.data()[16..32].to_vec(),
        )
        .unwrap();
        let single = Tensor::new(vec![1, 1, 3, 3], {
            let mut k = vec![0.0; 9];
            k[4] = 1.0;
            k
        })
        .unwrap();
        let want = optical_conv_ideal(&green, &single).unwrap();
        assert_eq!(out.data(), want.data());
    }

    #[test]
    fn neutral_capture_is_bitwise_ideal() {
        let img = Tensor::from_fn(&[2, 1, 6, 6], |i| (i as f64 * 0.37).sin());
        let kernels = Tensor::from_fn(&[3, 1, 3, 3], |i| (i as f64 * 0.11).cos());
        let frontend = fabricate(&kernels, FabricationNoiseSpec::neutral()).unwrap();
        let captured = frontend.capture(&img, &mut test_rng()).unwrap();
        let ideal = optical_conv_ideal(&img, &kernels).unwrap();
        assert_eq!(captured.data(), ideal.data());
    }

    #[test]
    fn pure_brightness_scale_is_exact() {
        let img = Tensor::from_fn(&[1, 1, 5, 5], |i| i as f64 * 0.2);
        let kernels = Tensor::from_fn(&[2, 1, 3, 3], |i| (i as f64 - 8.0) * 0.1);
        let noise = FabricationNoiseSpec {
            alpha_cal: 0.5,
            ..FabricationNoiseSpec::neutral()
        };
        let frontend = fabricate(&kernels, noise).unwrap();
        let captured = frontend.capture(&img, &mut test_rng()).unwrap();
        let ideal = optical_conv_ideal(&img, &kernels).unwrap();
        for (c, i) in captured.data().iter().zip(ideal.data()) {
            assert_eq!(*c, i * 0.5);
        }
    }

    #[test]
    fn fabrication_delta_statistics() {
        let kernels = Tensor::from_fn(&[8, 1, 41, 41], |i| ((i % 17) as f64 - 8.0) * 0.25);
        let noise = FabricationNoiseSpec {
            delta_sigma: 0.1,
            seed: 99,
            ..FabricationNoiseSpec::neutral()
        };
        let frontend = fabricate(&kernels, noise).unwrap();
        let n = kernels.len();
        assert!(n >= 10_000);
        let target = 0.1 * kernels.rms();
        let mut ss = 0.0;
        for (r, i) in frontend.realized_kernels().data().iter().zip(kernels.data()) {
            ss += (r - i) * (r - i);
        }
        let std = (ss / n as f64).sqrt();
        assert!(
            (std - target).abs() / target < 0.10,
            "std {std} vs target {target}"
        );
    }

    #[test]
    fn same_seed_fabricates_identically() {
        let kernels = Tensor::from_fn(&[2, 1, 5, 5], |i| (i as f64).sqrt());
        let noise = FabricationNoiseSpec {
            delta_sigma: 0.2,
            seed: 7,
            ..FabricationNoiseSpec::neutral()
        };
        let a = fabricate(&kernels, noise).unwrap();
        let b = fabricate(&kernels, noise).unwrap();
        assert_eq!(a.realized_kernels().data(), b.realized_kernels().data());
    }

    #[test]
    fn capture_matches_scalar_noise_model_oracle() {
        // Independent scalar-loop implementation of the measured output with
        // a shared epsilon draw.
        let img = Tensor::from_fn(&[1, 1, 6, 6], |i| ((i * 7 % 13) as f64) * 0.1);
        let kernels = Tensor::from_fn(&[1, 1, 3, 3], |i| ((i * 5 % 9) as f64 - 4.0) * 0.2);
        let noise = FabricationNoiseSpec {
            alpha_cal: 0.8,
            beta_cal: 0.9,
            shift_x: 1,
            shift_y: -1,
            delta_sigma: 0.1,
            epsilon_sigma: 0.05,
            seed: 42,
        };
        let frontend = fabricate(&kernels, noise).unwrap();
        let mut rng = rng_from_seed(777);
        let captured = frontend.capture(&img, &mut rng).unwrap();

        // Oracle (quadruple loop over output pixels and kernel taps).
        let realized = frontend.realized_kernels().data();
        let (h, w, k) = (6usize, 6usize, 3usize);
        let (oh, ow) = (h - k + 1, w - k + 1);
        let ideal = optical_conv_ideal(&img, &kernels).unwrap();
        let eps_std = noise.epsilon_sigma * ideal.rms();
        let mut oracle_rng = rng_from_seed(777);
        let gain = noise.alpha_cal * noise.beta_cal;
        let a = img.data();
        let mut want = vec![0.0; oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = oy as i64 + ky as i64 - noise.shift_y;
                        let ix = ox as i64 + kx as i64 - noise.shift_x;
                        if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                            continue;
                        }
                        acc += a[iy as usize * w + ix as usize] * realized[ky * k + kx];
                    }
                }
                want[oy * ow + ox] = gain * acc;
            }
        }
        for v in &mut want {
            let z: f64 = oracle_rng.sample(StandardNormal);
            *v += z * eps_std;
        }
        for (c, o) in captured.data().iter().zip(&want) {
            assert!((c - o).abs() < 1e-12, "{c} vs {o}");
        }
    }

    #[test]
    fn capture_is_linear_in_image_for_fixed_noise() {
        let a1 = Tensor::from_fn(&[1, 1, 6, 6], |i| (i as f64 * 0.31).sin());
        let a2 = Tensor::from_fn(&[1, 1, 6, 6], |i| (i as f64 * 0.17).cos());
        let sum = Tensor::new(
            vec![1, 1, 6, 6],
            a1.data().iter().zip(a2.data()).map(|(x, y)| x + y).collect(),
        )
        .unwrap();
        let kernels = Tensor::from_fn(&[2, 1, 3, 3], |i| (i as f64 - 8.0) * 0.07);
        let noise = FabricationNoiseSpec {
            alpha_cal: 0.7,
            beta_cal: 1.2,
            shift_x: -1,
            shift_y: 2,
            delta_sigma: 0.15,
            epsilon_sigma: 0.0,
            seed: 5,
        };
        let frontend = fabricate(&kernels, noise).unwrap();
        let mut rng = test_rng();
        let c1 = frontend.capture(&a1, &mut rng).unwrap();
        let c2 = frontend.capture(&a2, &mut rng).unwrap();
        let cs = frontend.capture(&sum, &mut rng).unwrap();
        for ((x, y), s) in c1.data().iter().zip(c2.data()).zip(cs.data()) {
            assert!((x + y - s).abs() < 1e-12);
        }
    }

    #[test]
    fn random_frontend_is_reproducible_and_frozen() {
        let a = random_frontend(4, 7, 1, 3, false).unwrap();
        let b = random_frontend(4, 7, 1, 3, false).unwrap();
        assert_eq!(a.ideal_kernels().data(), b.ideal_kernels().data());
        assert_eq!(a.realized_kernels().data(), a.ideal_kernels().data());
        let nn = random_frontend(4, 7, 1, 3, true).unwrap();
        assert!(nn.ideal_kernels().data().iter().all(|&v| v >= 0.0));
    }
}
