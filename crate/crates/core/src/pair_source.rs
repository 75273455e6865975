//! Per-channel rate model for photon pairs, Raman noise and dark counts,
//! the SFWM generation envelope, and the ideal/noisy polarization states.
//!
//! Detected singles and coincidences follow
//!
//! ```text
//! N_s = η_s R_PGR P² + R_RS,s P + N_DC,s
//! N_i = η_i R_PGR P² + R_RS,i P + N_DC,i
//! N_c = η_s η_i R_PGR P² + N_AC,      N_AC = N_s N_i τ_w
//! ```

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::cavity::ChannelPair;
use crate::error::{Error, Result};
use crate::state::{TwoQubitState, Vector4c, C64};

/// Rate coefficients of one signal/idler channel pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelRateModel {
    /// Channel pair index `m`.
    pub m: u32,
    /// Intrinsic pair generation rate, s⁻¹ mW⁻².
    pub pgr: f64,
    pub eta_s: f64,
    pub eta_i: f64,
    /// Raman coefficients, s⁻¹ mW⁻¹.
    pub raman_s: f64,
    pub raman_i: f64,
    /// Dark counts (including filter leakage), s⁻¹.
    pub dark_s: f64,
    pub dark_i: f64,
    /// Coincidence window, s.
    pub tau_w: f64,
}

impl ChannelRateModel {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("pgr", self.pgr),
            ("raman_s", self.raman_s),
            ("raman_i", self.raman_i),
            ("dark_s", self.dark_s),
            ("dark_i", self.dark_i),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::param(
                    name,
                    format!("rate {v} must be finite and non-negative"),
                ));
            }
        }
        for (name, v) in [("eta_s", self.eta_s), ("eta_i", self.eta_i)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::param(name, format!("efficiency {v} outside [0, 1]")));
            }
        }
        if !(self.tau_w > 0.0) {
            return Err(Error::param("tau_w", "coincidence window must be positive"));
        }
        Ok(())
    }

    /// Detected single-arm SFWM coefficient `η R_PGR` (s⁻¹ mW⁻²).
    pub fn singles_quadratic(&self, arm: Arm) -> f64 {
        match arm {
            Arm::Signal => self.eta_s * self.pgr,
            Arm::Idler => self.eta_i * self.pgr,
        }
    }

    /// Detected net coincidence coefficient `R_c = η_s η_i R_PGR`.
    pub fn coincidence_quadratic(&self) -> f64 {
        self.eta_s * self.eta_i * self.pgr
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Signal,
    Idler,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvelopeShape {
    #[default]
    Gaussian,
    /// `sech²` profile with the same FWHM.
    Sech2,
}

/// Relative SFWM efficiency versus signal detuning from the pump.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeSpec {
    /// Full width at half maximum of the generation envelope, Hz.
    pub fwhm: f64,
    #[serde(default)]
    pub shape: EnvelopeShape,
}

impl Default for EnvelopeSpec {
    fn default() -> Self {
        Self {
            fwhm: 3.0e12,
            shape: EnvelopeShape::Gaussian,
        }
    }
}

impl EnvelopeSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.fwhm > 0.0) {
            return Err(Error::param("fwhm", "envelope width must be positive"));
        }
        Ok(())
    }

    pub fn at_detuning(&self, detuning: f64) -> f64 {
        let x = detuning / self.fwhm;
        match self.shape {
            EnvelopeShape::Gaussian => (-4.0 * LN_2 * x * x).exp(),
            EnvelopeShape::Sech2 => {
                // sech²(k x) = 1/2 at x = 1/2  =>  k = 2 acosh(√2)
                let k = 2.0 * std::f64::consts::SQRT_2.acosh();
                let s = 1.0 / (k * x).cosh();
                s * s
            }
        }
    }
}

pub fn pgr_envelope(channel: &ChannelPair, pump_frequency: f64, env: &EnvelopeSpec) -> f64 {
    env.at_detuning(channel.signal_frequency - pump_frequency)
}

fn check_power(power: f64) -> Result<()> {
    if !(power >= 0.0) || !power.is_finite() {
        return Err(Error::InvalidInput(format!(
            "pump power {power} mW must be non-negative"
        )));
    }
    Ok(())
}

/// Detected single-photon rate of one arm at pump power `power` (mW).
pub fn expected_singles(model: &ChannelRateModel, arm: Arm, power: f64) -> Result<f64> {
    check_power(power)?;
    let (raman, dark) = match arm {
        Arm::Signal => (model.raman_s, model.dark_s),
        Arm::Idler => (model.raman_i, model.dark_i),
    };
    Ok(model.singles_quadratic(arm) * power * power + raman * power + dark)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoincidenceRates {
    pub true_rate: f64,
    pub accidental_rate: f64,
}

impl CoincidenceRates {
    pub fn total(&self) -> f64 {
        self.true_rate + self.accidental_rate
    }

    /// Model coincidence-to-accidental ratio `true / accidental`.
    pub fn car(&self) -> Option<f64> {
        (self.accidental_rate > 0.0).then(|| self.true_rate / self.accidental_rate)
    }

    /// Fraction of coincidences that are true pairs.
    pub fn signal_fraction(&self) -> f64 {
        let t = self.total();
        if t > 0.0 {
            self.true_rate / t
        } else {
            0.0
        }
    }
}

/// True and accidental coincidence rates; accidentals use the flat
/// background estimate `N_s N_i τ_w`.
pub fn expected_coincidences(model: &ChannelRateModel, power: f64) -> Result<CoincidenceRates> {
    let ns = expected_singles(model, Arm::Signal, power)?;
    let ni = expected_singles(model, Arm::Idler, power)?;
    Ok(CoincidenceRates {
        true_rate: model.coincidence_quadratic() * power * power,
        accidental_rate: ns * ni * model.tau_w,
    })
}

/// `(|HH⟩ + e^{iθ}|VV⟩)/√2`.
pub fn ideal_ket(theta: f64) -> Vector4c {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let zero = C64::new(0.0, 0.0);
    Vector4c::new(C64::new(s, 0.0), zero, zero, C64::from_polar(s, theta))
}

pub fn ideal_state(theta: f64) -> TwoQubitState {
    TwoQubitState::from_pure(&ideal_ket(theta)).expect("normalized ket")
}

/// Werner-type mixture `p ρ(θ) + (1 - p) I/4`.
pub fn noisy_state(theta: f64, signal_fraction: f64) -> Result<TwoQubitState> {
    if !(0.0..=1.0).contains(&signal_fraction) {
        return Err(Error::InvalidInput(format!(
            "signal fraction {signal_fraction} outside [0, 1]"
        )));
    }
    ideal_state(theta).mix(&TwoQubitState::maximally_mixed(), signal_fraction)
}

/// Fidelity of [`noisy_state`] to its ideal state: `p + (1 - p)/4`.
pub fn werner_fidelity(signal_fraction: f64) -> f64 {
    signal_fraction + (1.0 - signal_fraction) / 4.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cavity::comb_grid;
    use approx::assert_relative_eq;

    fn calibrated_channel() -> ChannelRateModel {
        ChannelRateModel {
            m: 4,
            pgr: 3.90e3 / 0.18,
            eta_s: 0.18,
            eta_i: 0.18,
            raman_s: 8.12e3,
            raman_i: 8.12e3,
            dark_s: 300.0,
            dark_i: 250.0,
            tau_w: 1e-9,
        }
    }

    #[test]
    fn envelope_shape() {
        let env = EnvelopeSpec::default();
        assert_relative_eq!(env.at_detuning(0.0), 1.0);
        assert_relative_eq!(env.at_detuning(1.5e12), 0.5, epsilon = 1e-12);
        assert_relative_eq!(env.at_detuning(-1.5e12), 0.5, epsilon = 1e-12);
        let sech = EnvelopeSpec {
            shape: EnvelopeShape::Sech2,
            ..env
        };
        assert_relative_eq!(sech.at_detuning(1.5e12), 0.5, epsilon = 1e-12);
        let grid = comb_grid(193.5e12, 99e9, 22).unwrap();
        for ch in &grid {
            let e = pgr_envelope(ch, 193.5e12, &env);
            if ch.index <= 15 {
                assert!(e > 0.5, "m={} {e}", ch.index);
            } else if ch.index >= 17 {
                assert!(e < 0.5, "m={} {e}", ch.index);
            }
        }
    }

    #[test]
    fn singles_follow_the_quadratic_law() {
        let m = calibrated_channel();
        let n1 = expected_singles(&m, Arm::Signal, 1.0).unwrap();
        assert_relative_eq!(n1, 3.90e3 + 8.12e3 + 300.0, max_relative = 1e-12);
        assert_eq!(expected_singles(&m, Arm::Idler, 0.0).unwrap(), 250.0);
        let q = |p: f64| m.singles_quadratic(Arm::Signal) * p * p;
        assert_relative_eq!(q(2.0), 4.0 * q(1.0));
        assert!(matches!(
            expected_singles(&m, Arm::Signal, -1.0),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn coincidence_limits() {
        let m = calibrated_channel();
        let c0 = expected_coincidences(&m, 0.0).unwrap();
        assert_eq!(c0.true_rate, 0.0);
        assert_relative_eq!(c0.accidental_rate, 300.0 * 250.0 * 1e-9);
        let lossless = ChannelRateModel {
            eta_s: 1.0,
            eta_i: 1.0,
            tau_w: 1e-300,
            ..m
        };
        let c = expected_coincidences(&lossless, 1.7).unwrap();
        assert_relative_eq!(c.true_rate, lossless.pgr * 1.7 * 1.7);
        assert!(c.accidental_rate < 1e-280);
    }

    #[test]
    fn state_family() {
        let rho = ideal_state(0.7);
        assert_relative_eq!(rho.purity(), 1.0, epsilon = 1e-12);
        let e = rho.matrix()[(0, 3)];
        assert_relative_eq!(e.re, 0.5 * (0.7f64).cos(), epsilon = 1e-15);
        assert_relative_eq!(e.im, -0.5 * (0.7f64).sin(), epsilon = 1e-15);
        let w = noisy_state(0.0, 0.8).unwrap();
        assert_relative_eq!(w.expectation(&ideal_ket(0.0)), 0.85, epsilon = 1e-12);
        assert_relative_eq!(
            noisy_state(0.0, 0.0).unwrap().expectation(&ideal_ket(0.0)),
            0.25,
            epsilon = 1e-12
        );
        assert_eq!(noisy_state(0.3, 1.0).unwrap(), ideal_state(0.3));
        assert!(noisy_state(0.0, 1.1).is_err());
    }

    #[test]
    fn validation() {
        assert!(calibrated_channel().validate().is_ok());
        assert!(ChannelRateModel {
            eta_s: 1.2,
            ..calibrated_channel()
        }
        .validate()
        .is_err());
        assert!(ChannelRateModel {
            dark_i: -1.0,
            ..calibrated_channel()
        }
        .validate()
        .is_err());
        assert!(ChannelRateModel {
            tau_w: 0.0,
            ..calibrated_channel()
        }
        .validate()
        .is_err());
    }
}
