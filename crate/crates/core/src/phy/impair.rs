use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iqcore::{IqFrame, Sample};

/// Synthetic transmitter hardware imperfections. These are what make one
/// radio distinguishable from another.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    /// 1-based device label.
    pub device_id: u32,
    /// Linear gain ratio of the Q branch relative to I.
    pub iq_gain_imbalance: f64,
    /// Quadrature skew in radians.
    pub iq_phase_imbalance: f64,
    pub dc_offset: Sample,
    /// Carrier frequency offset in cycles per sample.
    pub cfo: f64,
    /// Standard deviation of the per-sample phase random walk, in radians.
    pub phase_noise_std: f64,
    /// Memoryless amplifier `y = a1 x + a3 x|x|^2 + a5 x|x|^4`.
    pub pa_coeffs: [f64; 3],
}

impl DeviceProfile {
    /// A perfect transmitter: [`apply_impairments`] leaves the signal unchanged.
    pub fn neutral(device_id: u32) -> Self {
        DeviceProfile {
            device_id,
            iq_gain_imbalance: 1.0,
            iq_phase_imbalance: 0.0,
            dc_offset: Sample::new(0.0, 0.0),
            cfo: 0.0,
            phase_noise_std: 0.0,
            pa_coeffs: [1.0, 0.0, 0.0],
        }
    }

    /// Draws a profile with nominally small imperfections, the way units off
    /// the same production line differ from each other.
    pub fn random(device_id: u32, rng: &mut impl Rng) -> Self {
        DeviceProfile {
            device_id,
            iq_gain_imbalance: 1.0 + rng.gen_range(-0.05..0.05),
            iq_phase_imbalance: rng.gen_range(-0.05..0.05),
            dc_offset: Sample::new(rng.gen_range(-0.03..0.03), rng.gen_range(-0.03..0.03)),
            cfo: rng.gen_range(-6e-5..6e-5),
            phase_noise_std: rng.gen_range(5e-4..2e-3),
            pa_coeffs: [1.0, rng.gen_range(-0.06..-0.01), rng.gen_range(-0.004..0.004)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.iq_gain_imbalance,
            self.iq_phase_imbalance,
            self.dc_offset.re,
            self.dc_offset.im,
            self.cfo,
            self.phase_noise_std,
        ]
        .iter()
        .chain(self.pa_coeffs.iter())
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("device profile has non-finite fields"));
        }
        if self.iq_gain_imbalance <= 0.0 {
            return Err(Error::invalid("iq_gain_imbalance must be positive"));
        }
        if self.phase_noise_std < 0.0 {
            return Err(Error::invalid("phase_noise_std must be non-negative"));
        }
        Ok(())
    }
}

/// Applies the profile's impairments in the fixed order: amplifier
/// nonlinearity, I/Q imbalance, DC offset, CFO rotation, phase noise.
///
/// The phase noise is a random walk `theta[n] = theta[n-1] + N(0, std^2)`
/// starting at zero; no random numbers are drawn when `phase_noise_std` is 0.
pub fn apply_impairments(x: &IqFrame, dev: &DeviceProfile, rng: &mut impl Rng) -> IqFrame {
    let [a1, a3, a5] = dev.pa_coeffs;
    let g = dev.iq_gain_imbalance;
    let phi = dev.iq_phase_imbalance;
    // y = mu x + nu conj(x); reduces to y = x for g = 1, phi = 0
    let mu = (Sample::new(1.0, 0.0) + Sample::from_polar(g, -phi)) * 0.5;
    let nu = (Sample::new(1.0, 0.0) - Sample::from_polar(g, phi)) * 0.5;
    let phase_noise = (dev.phase_noise_std > 0.0).then(|| Normal::new(0.0, dev.phase_noise_std).expect("std >= 0"));

    let mut theta = 0.0;
    let out = x
        .iter()
        .enumerate()
        .map(|(n, &s)| {
            let p = s.norm_sqr();
            let amp = if a3 == 0.0 && a5 == 0.0 { s * a1 } else { s * (a1 + a3 * p + a5 * p * p) };
            let iq = if nu == Sample::new(0.0, 0.0) && mu == Sample::new(1.0, 0.0) { amp } else { mu * amp + nu * amp.conj() };
            let mut y = iq + dev.dc_offset;
            if dev.cfo != 0.0 {
                y *= Sample::from_polar(1.0, 2.0 * PI * dev.cfo * n as f64);
            }
            if let Some(dist) = &phase_noise {
                if n > 0 {
                    theta += dist.sample(rng);
                }
                y *= Sample::from_polar(1.0, theta);
            }
            y
        })
        .collect();
    IqFrame::new(out).expect("impairments preserve length and finiteness")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn signal(n: usize) -> IqFrame {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        IqFrame::new((0..n).map(|_| Sample::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect()).unwrap()
    }

    #[test]
    fn neutral_profile_is_identity() {
        let x = signal(50);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(apply_impairments(&x, &DeviceProfile::neutral(1), &mut rng), x);
    }

    #[test]
    fn dc_offset_adds() {
        let x = signal(20);
        let dev = DeviceProfile { dc_offset: Sample::new(0.1, 0.0), ..DeviceProfile::neutral(1) };
        let y = apply_impairments(&x, &dev, &mut ChaCha8Rng::seed_from_u64(0));
        for (a, b) in x.iter().zip(y.iter()) {
            assert!((b - a - Sample::new(0.1, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn cfo_rotation_closed_form() {
        let x = signal(100);
        let dev = DeviceProfile { cfo: 0.01, ..DeviceProfile::neutral(1) };
        let y = apply_impairments(&x, &dev, &mut ChaCha8Rng::seed_from_u64(0));
        let rot = y[99] / x[99];
        let want = Sample::from_polar(1.0, 2.0 * PI * 0.99);
        assert!((rot - want).norm() < 1e-12);
    }

    #[test]
    fn iq_imbalance_matches_branch_model() {
        let g = 1.04;
        let phi = 0.03;
        let dev = DeviceProfile { iq_gain_imbalance: g, iq_phase_imbalance: phi, ..DeviceProfile::neutral(1) };
        let x = signal(10);
        let y = apply_impairments(&x, &dev, &mut ChaCha8Rng::seed_from_u64(0));
        let mu = (Sample::new(1.0, 0.0) + Sample::from_polar(g, -phi)) * 0.5;
        let nu = (Sample::new(1.0, 0.0) - Sample::from_polar(g, phi)) * 0.5;
        for (a, b) in x.iter().zip(y.iter()) {
            assert!((b - (mu * a + nu * a.conj())).norm() < 1e-15);
        }
    }

    #[test]
    fn phase_noise_preserves_magnitude_and_is_seeded() {
        let x = signal(64);
        let dev = DeviceProfile { phase_noise_std: 0.01, ..DeviceProfile::neutral(1) };
        let y1 = apply_impairments(&x, &dev, &mut ChaCha8Rng::seed_from_u64(5));
        let y2 = apply_impairments(&x, &dev, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(y1, y2);
        for (a, b) in x.iter().zip(y1.iter()) {
            assert!((a.norm() - b.norm()).abs() < 1e-12);
        }
        assert_ne!(y1, x);
    }

    #[test]
    fn profile_validation() {
        let mut dev = DeviceProfile::neutral(1);
        assert!(dev.validate().is_ok());
        dev.iq_gain_imbalance = 0.0;
        assert!(dev.validate().is_err());
        let dev = DeviceProfile { phase_noise_std: -1.0, ..DeviceProfile::neutral(1) };
        assert!(dev.validate().is_err());
    }
}
