//! Calibration of measured feature maps against the designed simulation:
//! integer shift by cross-correlation, then a least-squares gain. Brightness
//! and misalignment attenuation are not separable from data, so one combined
//! gain is reported.

use super::shift_images;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

const SHIFT_RANGE: i64 = 3;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Calibration {
    /// Combined alpha * beta estimate.
    pub gain: f64,
    pub shift_x: i64,
    pub shift_y: i64,
    /// Normalized cross-correlation at the selected shift.
    pub score: f64,
}

/// Estimates (gain, shift) such that `measured ~ gain * shift(simulated)`.
/// The comparison is restricted to the interior region where the shifted
/// simulation is defined, so a noiseless injected shift is recovered
/// exactly.
pub fn calibrate(measured: &Tensor, simulated: &Tensor) -> Result<Calibration> {
    if measured.shape() != simulated.shape() {
        return Err(Error::ShapeMismatch {
            location: "calibrate".into(),
            expected: format!("{:?}", simulated.shape()),
            got: format!("{:?}", measured.shape()),
        });
    }
    if measured.shape().len() != 4 {
        return Err(Error::ShapeMismatch {
            location: "calibrate".into(),
            expected: "n x m x h x w feature maps".into(),
            got: format!("{:?}", measured.shape()),
        });
    }
    if simulated.data().iter().all(|&v| v == 0.0) {
        return Err(Error::Numerical(
            "calibration needs a non-zero simulated reference".into(),
        ));
    }
    let shape = measured.shape();
    let (planes, h, w) = (shape[0] * shape[1], shape[2] as i64, shape[3] as i64);
    let plane = (h * w) as usize;

    let mut best: Option<Calibration> = None;
    for sy in -SHIFT_RANGE..=SHIFT_RANGE {
        for sx in -SHIFT_RANGE..=SHIFT_RANGE {
            let y_lo = sy.max(0);
            let y_hi = h + sy.min(0);
            let x_lo = sx.max(0);
            let x_hi = w + sx.min(0);
            if y_lo >= y_hi || x_lo >= x_hi {
                continue;
            }
            let shifted = shift_images(simulated, sy, sx);
            let mut dot = 0.0;
            let mut ss = 0.0;
            let mut mm = 0.0;
            for p in 0..planes {
                let m = &measured.data()[p * plane..(p + 1) * plane];
                let s = &shifted.data()[p * plane..(p + 1) * plane];
                for y in y_lo..y_hi {
                    for x in x_lo..x_hi {
                        let at = (y * w + x) as usize;
                        dot += m[at] * s[at];
                        ss += s[at] * s[at];
                        mm += m[at] * m[at];
                    }
                }
            }
            if ss <= 0.0 || mm <= 0.0 {
                continue;
            }
            let score = dot / (ss.sqrt() * mm.sqrt());
            if best.as_ref().map_or(true, |b| score > b.score) {
                best = Some(Calibration {
                    gain: dot / ss,
                    shift_x: sx,
                    shift_y: sy,
                    score,
                });
            }
        }
    }
    best.ok_or_else(|| Error::Numerical("calibration found no valid shift window".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optics::{fabricate, FabricationNoiseSpec};
    use crate::rng::rng_from_seed;

    fn frontend_and_images() -> (crate::optics::FabricatedFrontend, Tensor) {
        let kernels = Tensor::from_fn(&[2, 1, 3, 3], |i| ((i * 7 % 11) as f64 - 5.0) * 0.2);
        let images = Tensor::from_fn(&[3, 1, 10, 10], |i| ((i * 13 % 23) as f64) * 0.05);
        (
            fabricate(&kernels, FabricationNoiseSpec::neutral()).unwrap(),
            images,
        )
    }

    #[test]
    fn identical_tensors_calibrate_to_identity() {
        let (frontend, images) = frontend_and_images();
        let sim = frontend.simulate_ideal(&images).unwrap();
        let cal = calibrate(&sim, &sim).unwrap();
        assert_eq!(cal.gain, 1.0);
        assert_eq!((cal.shift_x, cal.shift_y), (0, 0));
    }

    #[test]
    fn injected_gain_and_shift_recovered_exactly() {
        let kernels = Tensor::from_fn(&[2, 1, 3, 3], |i| ((i * 7 % 11) as f64 - 5.0) * 0.2);
        let images = Tensor::from_fn(&[3, 1, 10, 10], |i| ((i * 13 % 23) as f64) * 0.05);
        let noise = FabricationNoiseSpec {
            alpha_cal: 0.8,
            beta_cal: 1.0,
            shift_x: 1,
            shift_y: 2,
            ..FabricationNoiseSpec::neutral()
        };
        let fab = fabricate(&kernels, noise).unwrap();
        let measured = fab.capture(&images, &mut rng_from_seed(0)).unwrap();
        let sim = fab.simulate_ideal(&images).unwrap();
        let cal = calibrate(&measured, &sim).unwrap();
        assert_eq!((cal.shift_x, cal.shift_y), (1, 2));
        assert!((cal.gain - 0.8).abs() < 1e-12, "gain {}", cal.gain);
    }

    #[test]
    fn noisy_gain_recovery_within_two_percent() {
        // Aperiodic image content; periodic fixtures alias the shift search.
        use rand::Rng as _;
        let mut rng = rng_from_seed(31);
        let kernels = Tensor::from_fn(&[2, 1, 3, 3], |i| ((i * 7 % 11) as f64 - 5.0) * 0.2);
        let images = Tensor::from_fn(&[6, 1, 12, 12], |_| rng.gen_range(0.0..1.0));
        let noise = FabricationNoiseSpec {
            alpha_cal: 0.75,
            beta_cal: 1.0,
            shift_x: -1,
            shift_y: 1,
            epsilon_sigma: 0.01,
            seed: 4,
            ..FabricationNoiseSpec::neutral()
        };
        let fab = fabricate(&kernels, noise).unwrap();
        let measured = fab.capture(&images, &mut rng_from_seed(9)).unwrap();
        let sim = fab.simulate_ideal(&images).unwrap();
        let cal = calibrate(&measured, &sim).unwrap();
        assert_eq!((cal.shift_x, cal.shift_y), (-1, 1));
        assert!((cal.gain - 0.75).abs() / 0.75 < 0.02, "gain {}", cal.gain);
    }

    #[test]
    fn all_zero_simulation_rejected() {
        let z = Tensor::zeros(&[1, 1, 5, 5]);
        assert!(calibrate(&z, &z).is_err());
    }
}
