//! Continuous-time sigmoid noise schedule and SNR-to-time step matching.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest and largest noise level the inverse schedule will accept after
/// clamping. Keeps `S⁻¹` and the square roots downstream finite.
pub const LEVEL_FLOOR: f64 = 1e-9;
pub const LEVEL_CEIL: f64 = 1.0 - 1e-9;

const BISECTION_ITERS: usize = 60;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `S(t) = (σ((t(e−g)+g)/τ) − σ(g/τ)) / (σ(e/τ) − σ(g/τ))` on `t ∈ [0, 1]`.
///
/// The reverse process is deterministic, so the reverse-step variance is
/// always zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub e: f64,
    pub g: f64,
    pub tau: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule {
            e: 3.0,
            g: 0.0,
            tau: 0.7,
        }
    }
}

impl NoiseSchedule {
    pub fn new(e: f64, g: f64, tau: f64) -> Result<Self> {
        let s = NoiseSchedule { e, g, tau };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Domain(format!("tau = {} must be positive", self.tau)));
        }
        if !(self.e > self.g) || !self.e.is_finite() || !self.g.is_finite() {
            return Err(Error::Domain(format!(
                "schedule needs e > g (got e = {}, g = {})",
                self.e, self.g
            )));
        }
        Ok(())
    }

    /// `σ_{s,t}` of the reverse conditional. Fixed at zero.
    pub fn reverse_variance(&self) -> f64 {
        0.0
    }

    /// Unchecked evaluation; `t` must already lie in `[0, 1]`.
    pub(crate) fn level(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        if t >= 1.0 {
            return 1.0;
        }
        let lo = sigmoid(self.g / self.tau);
        let hi = sigmoid(self.e / self.tau);
        (sigmoid((t * (self.e - self.g) + self.g) / self.tau) - lo) / (hi - lo)
    }

    /// Noise level `β̄_t = S(t)`.
    pub fn noise_level(&self, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("time {t} outside [0, 1]")));
        }
        Ok(self.level(t))
    }

    /// `S⁻¹(β̄)` by bisection on `[0, 1]`.
    ///
    /// Inputs are clamped to `[LEVEL_FLOOR, LEVEL_CEIL]` before inversion.
    pub fn invert_noise_level(&self, level: f64) -> Result<f64> {
        if !(level > 0.0 && level < 1.0) {
            return Err(Error::Domain(format!("noise level {level} not in (0, 1)")));
        }
        let target = level.clamp(LEVEL_FLOOR, LEVEL_CEIL);
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..BISECTION_ITERS {
            let mid = 0.5 * (lo + hi);
            if self.level(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// Diffusion time matching an equivalent SNR `γ`: `S⁻¹(1/(1+γ))`.
    ///
    /// `γ = +∞` maps to time zero.
    pub fn step_match(&self, snr_linear: f64) -> Result<f64> {
        if !(snr_linear > 0.0) {
            return Err(Error::Domain(format!("snr {snr_linear} must be positive")));
        }
        if snr_linear == f64::INFINITY {
            return Ok(0.0);
        }
        self.invert_noise_level(1.0 / (1.0 + snr_linear))
    }

    /// `(t, β̄_t)` on `points` evenly spaced times covering `[0, 1]`.
    pub fn dump(&self, points: usize) -> Vec<(f64, f64)> {
        let last = points.saturating_sub(1).max(1) as f64;
        (0..points)
            .map(|k| {
                let t = k as f64 / last;
                (t, self.level(t))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Closed-form inverse used only as an independent check on bisection.
    fn closed_form_inverse(s: &NoiseSchedule, level: f64) -> f64 {
        let lo = sigmoid(s.g / s.tau);
        let hi = sigmoid(s.e / s.tau);
        let p = lo + level * (hi - lo);
        let x = (p / (1.0 - p)).ln();
        (x * s.tau - s.g) / (s.e - s.g)
    }

    #[test]
    fn endpoints_are_exact() {
        let s = NoiseSchedule::default();
        assert_eq!(s.noise_level(0.0).unwrap(), 0.0);
        assert_eq!(s.noise_level(1.0).unwrap(), 1.0);
        let odd = NoiseSchedule::new(2.9, 0.1, 0.3).unwrap();
        assert_eq!(odd.noise_level(0.0).unwrap(), 0.0);
        assert_eq!(odd.noise_level(1.0).unwrap(), 1.0);
    }

    #[test]
    fn midpoint_value() {
        // σ(1.5/0.7) = 0.894 997..., σ(0) = 0.5, σ(3/0.7) = 0.986 418...
        let s = NoiseSchedule::default();
        let v = s.noise_level(0.5).unwrap();
        assert!((v - 0.8120).abs() < 5e-5, "{v}");
        assert!((v - 0.812_049_075_668_666_2).abs() < 1e-12);
    }

    #[test]
    fn strictly_increasing_on_grid() {
        let s = NoiseSchedule::default();
        let grid = s.dump(1001);
        assert_eq!(grid.len(), 1001);
        for w in grid.windows(2) {
            assert!(w[1].1 > w[0].1);
        }
    }

    #[test]
    fn rejects_time_outside_unit_interval() {
        let s = NoiseSchedule::default();
        assert!(s.noise_level(-0.1).is_err());
        assert!(s.noise_level(1.0 + 1e-12).is_err());
        assert!(s.noise_level(f64::NAN).is_err());
    }

    #[test]
    fn inverse_matches_closed_form() {
        let s = NoiseSchedule::default();
        let t = s.invert_noise_level(0.5).unwrap();
        assert!((t - 0.2480).abs() < 5e-5, "{t}");
        assert!((t - closed_form_inverse(&s, 0.5)).abs() < 1e-12);
    }

    #[test]
    fn inverse_round_trip() {
        use rand::{Rng, SeedableRng};
        let s = NoiseSchedule::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let t: f64 = rng.random_range(0.01..0.99);
            let back = s.invert_noise_level(s.noise_level(t).unwrap()).unwrap();
            assert!((back - t).abs() < 1e-9);
        }
    }

    #[test]
    fn inverse_residual_bound_on_grid() {
        let s = NoiseSchedule::default();
        for k in 1..1000 {
            let level = k as f64 / 1000.0;
            let t = s.invert_noise_level(level).unwrap();
            assert!((s.noise_level(t).unwrap() - level).abs() <= 1e-10);
        }
    }

    #[test]
    fn inverse_near_zero_goes_to_zero() {
        let s = NoiseSchedule::default();
        let a = s.invert_noise_level(1e-6).unwrap();
        let b = s.invert_noise_level(1e-8).unwrap();
        assert!(b < a && b < 1e-7);
    }

    #[test]
    fn inverse_rejects_closed_endpoints() {
        let s = NoiseSchedule::default();
        assert!(s.invert_noise_level(0.0).is_err());
        assert!(s.invert_noise_level(1.0).is_err());
        assert!(s.invert_noise_level(-0.5).is_err());
    }

    #[test]
    fn step_match_examples() {
        let s = NoiseSchedule::default();
        let m = s.step_match(1.0).unwrap();
        assert!((m - 0.2480).abs() < 5e-5);
        let m10 = s.step_match(10.0).unwrap();
        let expect = s.invert_noise_level(1.0 / 11.0).unwrap();
        assert_eq!(m10, expect);
        assert!((s.noise_level(m10).unwrap() - 0.090_909_090_909).abs() < 1e-10);
        assert!(s.step_match(1e12).unwrap() < 1e-9);
        assert_eq!(s.step_match(f64::INFINITY).unwrap(), 0.0);
        assert!(s.step_match(0.0).is_err());
        assert!(s.step_match(-1.0).is_err());
    }

    #[test]
    fn variance_preserving_coefficients() {
        let s = NoiseSchedule::default();
        for (_, b) in s.dump(101) {
            let a2 = (1.0 - b).sqrt().powi(2);
            let b2 = b.sqrt().powi(2);
            assert!((a2 + b2 - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn reverse_variance_is_zero() {
        assert_eq!(NoiseSchedule::default().reverse_variance(), 0.0);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(NoiseSchedule::new(3.0, 0.0, 0.0).is_err());
        assert!(NoiseSchedule::new(0.0, 3.0, 0.7).is_err());
    }
}
