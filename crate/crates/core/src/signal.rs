//! AMCW four-phase correlation model and its inverse.
//!
//! The emitted light is modulated as `cos(ωt)`; the return carries an
//! attenuated amplitude `α`, a round-trip phase shift `φ` and a DC offset `δ`.
//! The sensor samples the correlation at `ωτ = 0°, 90°, 180°, 270°`, giving
//! `cᵢ = (α/2)·cos(φ + i·π/2) + δ`. Phase and amplitude are recovered from the
//! two pairwise differences, which cancel the offset.

use std::f64::consts::{PI, TAU};

use thiserror::Error;

/// Speed of light in vacuum (m/s).
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum SignalError {
    /// Both quadrature differences are exactly zero; the phase is undefined.
    #[error("zero amplitude: quadrature differences are both zero")]
    ZeroAmplitude,
    #[error("invalid modulation frequency {0} Hz")]
    InvalidFrequency(f64),
}

/// Modulation settings of the illumination source.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModulationConfig {
    pub mod_freq_hz: f64,
    pub light_speed_m_s: f64,
}

impl ModulationConfig {
    pub fn new(mod_freq_hz: f64) -> Result<Self, SignalError> {
        if !(mod_freq_hz.is_finite() && mod_freq_hz > 0.0) {
            return Err(SignalError::InvalidFrequency(mod_freq_hz));
        }
        Ok(Self {
            mod_freq_hz,
            light_speed_m_s: SPEED_OF_LIGHT,
        })
    }

    /// Angular modulation frequency ω = 2πf.
    pub fn angular_freq(&self) -> f64 {
        TAU * self.mod_freq_hz
    }
}

impl Default for ModulationConfig {
    fn default() -> Self {
        Self {
            mod_freq_hz: 6.0e6,
            light_speed_m_s: SPEED_OF_LIGHT,
        }
    }
}

/// The four correlation samples of one pixel, at 0°, 90°, 180° and 270°.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FourPhaseSamples {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

impl FourPhaseSamples {
    pub fn new(c0: f64, c1: f64, c2: f64, c3: f64) -> Self {
        Self { c0, c1, c2, c3 }
    }

    pub fn from_array(c: [f64; 4]) -> Self {
        Self::new(c[0], c[1], c[2], c[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.c0, self.c1, self.c2, self.c3]
    }

    /// Shifts all four samples by the same constant.
    pub fn offset_by(self, k: f64) -> Self {
        Self::new(self.c0 + k, self.c1 + k, self.c2 + k, self.c3 + k)
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// `(c3 − c1, c0 − c2)`: the sine and cosine quadrature components.
    #[inline]
    fn quadrature(&self) -> (f64, f64) {
        (self.c3 - self.c1, self.c0 - self.c2)
    }
}

/// Ground-truth parameters of the returned signal at one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelTruth {
    pub alpha: f64,
    pub phase: f64,
    pub offset: f64,
}

impl PixelTruth {
    /// Builds a pixel truth, wrapping the phase into `[0, 2π)` and clamping
    /// negative amplitude/offset to zero.
    pub fn new(alpha: f64, phase: f64, offset: f64) -> Self {
        Self {
            alpha: alpha.max(0.0),
            phase: wrap_phase(phase),
            offset: offset.max(0.0),
        }
    }
}

/// Wraps an angle into `[0, 2π)`.
#[inline]
pub fn wrap_phase(phase: f64) -> f64 {
    let w = phase.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs.
    if w >= TAU {
        0.0
    } else {
        w
    }
}

pub fn sample_correlation(truth: &PixelTruth) -> FourPhaseSamples {
    let half = truth.alpha / 2.0;
    let c = |k: f64| half * (truth.phase + k * PI / 2.0).cos() + truth.offset;
    FourPhaseSamples::new(c(0.0), c(1.0), c(2.0), c(3.0))
}

/// Recovers the phase shift with a quadrant-aware arctangent.
pub fn phase_from_samples(s: &FourPhaseSamples) -> Result<f64, SignalError> {
    let (num, den) = s.quadrature();
    if num == 0.0 && den == 0.0 {
        return Err(SignalError::ZeroAmplitude);
    }
    Ok(wrap_phase(num.atan2(den)))
}

/// Demodulated amplitude `α/2`.
pub fn amplitude_from_samples(s: &FourPhaseSamples) -> f64 {
    let (num, den) = s.quadrature();
    num.hypot(den) / 2.0
}

/// `d = c·φ / (2ω)`.
pub fn depth_from_phase(phase: f64, cfg: &ModulationConfig) -> f64 {
    let d = cfg.light_speed_m_s * phase / (2.0 * cfg.angular_freq());
    // Guard the half-open interval against rounding at the top end.
    let range = unambiguous_range(cfg);
    if d >= range {
        0.0
    } else {
        d
    }
}

/// `φ = wrap(2ω·d / c)`. Distances past the unambiguous range roll over.
pub fn phase_from_depth(depth: f64, cfg: &ModulationConfig) -> f64 {
    wrap_phase(2.0 * cfg.angular_freq() * depth / cfg.light_speed_m_s)
}

/// `c / (2f)`.
pub fn unambiguous_range(cfg: &ModulationConfig) -> f64 {
    cfg.light_speed_m_s / (2.0 * cfg.mod_freq_hz)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn six_mhz() -> ModulationConfig {
        ModulationConfig::new(6.0e6).unwrap()
    }

    #[test]
    fn correlation_examples() {
        let s = sample_correlation(&PixelTruth::new(1.0, 0.0, 0.0));
        assert_eq!(s.to_array(), [0.5, 0.5 * (PI / 2.0).cos(), -0.5, 0.5 * (1.5 * PI).cos()]);
        assert!(close(s.c1, 0.0, 1e-15) && close(s.c3, 0.0, 1e-15));

        let s = sample_correlation(&PixelTruth::new(1.0, 0.0, 2.0));
        for (got, want) in s.to_array().iter().zip([2.5, 2.0, 1.5, 2.0]) {
            assert!(close(*got, want, 1e-15));
        }

        let s = sample_correlation(&PixelTruth::new(2.0, PI / 2.0, 0.0));
        for (got, want) in s.to_array().iter().zip([0.0, -1.0, 0.0, 1.0]) {
            assert!(close(*got, want, 1e-15), "{got} vs {want}");
        }
    }

    #[test]
    fn phase_examples() {
        let p = phase_from_samples(&FourPhaseSamples::new(0.5, 0.0, -0.5, 0.0)).unwrap();
        assert_eq!(p, 0.0);
        let p = phase_from_samples(&FourPhaseSamples::new(0.0, -0.5, 0.0, 0.5)).unwrap();
        assert!(close(p, PI / 2.0, 1e-15));
        let p = phase_from_samples(&FourPhaseSamples::new(2.5, 2.0, 1.5, 2.0)).unwrap();
        assert_eq!(p, 0.0);
    }

    #[test]
    fn zero_differences_are_rejected() {
        let s = FourPhaseSamples::new(3.0, 3.0, 3.0, 3.0);
        assert_eq!(phase_from_samples(&s), Err(SignalError::ZeroAmplitude));
    }

    #[test]
    fn amplitude_examples() {
        assert_eq!(amplitude_from_samples(&FourPhaseSamples::new(0.5, 0.0, -0.5, 0.0)), 0.5);
        assert_eq!(amplitude_from_samples(&FourPhaseSamples::default()), 0.0);
        let a = amplitude_from_samples(&FourPhaseSamples::new(3.0, 1.0, -3.0, -1.0));
        assert!(close(a, 40f64.sqrt() / 2.0, 1e-15));
        assert!(close(a, 3.1623, 1e-4));
    }

    #[test]
    fn depth_examples() {
        let cfg = six_mhz();
        assert_eq!(depth_from_phase(0.0, &cfg), 0.0);
        assert!(close(depth_from_phase(PI, &cfg), 12.4914, 1e-4));
        assert!(close(depth_from_phase(PI / 2.0, &cfg), 6.2457, 1e-4));
        assert!(close(depth_from_phase(PI, &cfg), SPEED_OF_LIGHT / 24.0e6, 1e-9));
    }

    #[test]
    fn phase_from_depth_examples() {
        let cfg = six_mhz();
        assert_eq!(phase_from_depth(0.0, &cfg), 0.0);
        let quarter = SPEED_OF_LIGHT / 48.0e6;
        assert!(close(phase_from_depth(quarter, &cfg), PI / 2.0, 1e-12));
        assert!(close(phase_from_depth(6.2457, &cfg), PI / 2.0, 1e-5));
        let range = unambiguous_range(&cfg);
        assert!(close(
            phase_from_depth(range + 1.0, &cfg),
            phase_from_depth(1.0, &cfg),
            1e-12
        ));
    }

    #[test]
    fn unambiguous_range_examples() {
        assert!(close(unambiguous_range(&six_mhz()), 24.9827, 1e-4));
        let twelve = ModulationConfig::new(12.0e6).unwrap();
        assert!(close(unambiguous_range(&twelve), 12.4914, 1e-4));
        for f in [1.0e6, 6.0e6, 20.0e6, 123.4e6] {
            let a = unambiguous_range(&ModulationConfig::new(f).unwrap());
            let b = unambiguous_range(&ModulationConfig::new(2.0 * f).unwrap());
            assert!(close(a / 2.0, b, 1e-12));
        }
    }

    #[test]
    fn rejects_bad_frequency() {
        assert!(ModulationConfig::new(0.0).is_err());
        assert!(ModulationConfig::new(f64::NAN).is_err());
    }

    #[test]
    fn wrap_handles_tiny_negatives() {
        let w = wrap_phase(-1e-300);
        assert!((0.0..TAU).contains(&w));
        assert_eq!(wrap_phase(TAU), 0.0);
    }

    proptest! {
        #[test]
        fn demodulation_round_trip(
            alpha in 1e-3f64..5000.0,
            phase in 0.0f64..TAU,
            offset in 0.0f64..5000.0,
        ) {
            let truth = PixelTruth::new(alpha, phase, offset);
            let s = sample_correlation(&truth);
            let p = phase_from_samples(&s).unwrap();
            let dp = (p - truth.phase).abs();
            prop_assert!(dp.min(TAU - dp) < 1e-9);
            prop_assert!((amplitude_from_samples(&s) - alpha / 2.0).abs() < 1e-9);
        }

        #[test]
        fn depth_round_trip(frac in 0.0f64..1.0) {
            let cfg = six_mhz();
            let d = frac * unambiguous_range(&cfg);
            let back = depth_from_phase(phase_from_depth(d, &cfg), &cfg);
            prop_assert!((back - d).abs() < 1e-9 || (unambiguous_range(&cfg) - d) < 1e-9);
            prop_assert!((0.0..unambiguous_range(&cfg)).contains(&back));
        }

        #[test]
        fn offset_invariance(
            c in proptest::array::uniform4(-100.0f64..100.0),
            k in -1000.0f64..1000.0,
        ) {
            // Differences of a shared integer-valued shift cancel exactly in
            // floating point only when the shift does not lose precision, so
            // use a dyadic shift.
            let k = (k * 1024.0).round() / 1024.0;
            let c = c.map(|v| (v * 1024.0).round() / 1024.0);
            let s = FourPhaseSamples::from_array(c);
            let shifted = s.offset_by(k);
            prop_assert_eq!(amplitude_from_samples(&s), amplitude_from_samples(&shifted));
            prop_assert_eq!(phase_from_samples(&s).ok(), phase_from_samples(&shifted).ok());
        }
    }
}
