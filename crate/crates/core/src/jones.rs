//! Jones calculus in the `{H, V}` basis.
//!
//! Waveplate convention: a retarder with retardance `Γ` and fast axis at
//! angle `α` from horizontal is
//!
//! ```text
//! J(Γ, α) = [ cos²α + e^{iΓ} sin²α     (e^{iΓ} - 1) sinα cosα ]
//!           [ (e^{iΓ} - 1) sinα cosα   sin²α + e^{iΓ} cos²α   ]
//! ```
//!
//! With this choice `QWP(π/4)·HWP(φ)·QWP(π/4)` acting on `[1; e^{iθ}]`
//! leaves the relative phase `4φ + θ - π`, `HWP(0) = diag(1, -1)` and
//! `QWP(π/4)|H⟩ ∝ |R⟩ = (|H⟩ + i|V⟩)/√2`. Global phases are ignored.

use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2, FRAC_PI_4, PI};
use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state::{kron_vec, TwoQubitState, Vector4c, C64};

pub type JonesMatrix = Matrix2<C64>;
pub type JonesVector = Vector2<C64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WaveplateKind {
    Half,
    Quarter,
}

impl WaveplateKind {
    pub fn retardance(self) -> f64 {
        match self {
            WaveplateKind::Half => PI,
            WaveplateKind::Quarter => FRAC_PI_2,
        }
    }
}

pub fn retarder(retardance: f64, angle: f64) -> JonesMatrix {
    let (s, c) = angle.sin_cos();
    let e = C64::from_polar(1.0, retardance);
    let one = C64::new(1.0, 0.0);
    let off = (e - one) * (s * c);
    JonesMatrix::new(
        one * (c * c) + e * (s * s),
        off,
        off,
        one * (s * s) + e * (c * c),
    )
}

pub fn waveplate(kind: WaveplateKind, angle: f64) -> JonesMatrix {
    retarder(kind.retardance(), angle)
}

/// The QWP(45°)·HWP(φ)·QWP(45°) phase compensator.
pub fn compensator(hwp_angle: f64) -> JonesMatrix {
    let q = waveplate(WaveplateKind::Quarter, FRAC_PI_4);
    q * waveplate(WaveplateKind::Half, hwp_angle) * q
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_phase(x: f64) -> f64 {
    let y = (x + PI).rem_euclid(2.0 * PI) - PI;
    if y <= -PI {
        y + 2.0 * PI
    } else {
        y
    }
}

/// Relative phase `arg(V) - arg(H)` of a Jones vector, wrapped to `(-π, π]`.
pub fn relative_phase(v: &JonesVector) -> f64 {
    wrap_phase(v[1].arg() - v[0].arg())
}

/// Propagates `[1; e^{iθ}]` through the compensator set at `hwp_angle` and
/// returns the output relative phase. Equals `4φ + θ - π` modulo 2π.
pub fn compensator_phase(theta: f64, hwp_angle: f64) -> f64 {
    let input = JonesVector::new(C64::new(1.0, 0.0), C64::from_polar(1.0, theta));
    relative_phase(&(compensator(hwp_angle) * input))
}

/// HWP angle that cancels a relative phase `θ`: `φ = (π - θ)/4`, reduced
/// to `[0, π/2)` (the compensator phase has period π/2 in `φ`).
pub fn compensation_angle(theta: f64) -> f64 {
    ((PI - theta) / 4.0).rem_euclid(FRAC_PI_2)
}

/// Polarization states used by the analysis modules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Polarization {
    H,
    V,
    D,
    A,
    R,
    L,
}

impl Polarization {
    pub const ALL: [Polarization; 6] = [
        Polarization::H,
        Polarization::V,
        Polarization::D,
        Polarization::A,
        Polarization::R,
        Polarization::L,
    ];

    pub fn ket(self) -> JonesVector {
        let s = FRAC_1_SQRT_2;
        let (h, v) = match self {
            Polarization::H => (C64::new(1.0, 0.0), C64::new(0.0, 0.0)),
            Polarization::V => (C64::new(0.0, 0.0), C64::new(1.0, 0.0)),
            Polarization::D => (C64::new(s, 0.0), C64::new(s, 0.0)),
            Polarization::A => (C64::new(s, 0.0), C64::new(-s, 0.0)),
            Polarization::R => (C64::new(s, 0.0), C64::new(0.0, s)),
            Polarization::L => (C64::new(s, 0.0), C64::new(0.0, -s)),
        };
        JonesVector::new(h, v)
    }

    pub fn basis(self) -> Basis {
        match self {
            Polarization::H | Polarization::V => Basis::HV,
            Polarization::D | Polarization::A => Basis::DA,
            Polarization::R | Polarization::L => Basis::RL,
        }
    }
}

impl fmt::Display for Polarization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = match self {
            Polarization::H => "H",
            Polarization::V => "V",
            Polarization::D => "D",
            Polarization::A => "A",
            Polarization::R => "R",
            Polarization::L => "L",
        };
        f.write_str(c)
    }
}

impl FromStr for Polarization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "H" | "h" => Ok(Polarization::H),
            "V" | "v" => Ok(Polarization::V),
            "D" | "d" => Ok(Polarization::D),
            "A" | "a" => Ok(Polarization::A),
            "R" | "r" => Ok(Polarization::R),
            "L" | "l" => Ok(Polarization::L),
            other => Err(Error::UnknownLabel(other.to_string())),
        }
    }
}

/// Rank-1 projector `|s⟩⟨s|` onto the named state.
pub fn projector(label: Polarization) -> JonesMatrix {
    let k = label.ket();
    k * k.adjoint()
}

/// Projector lookup by text label (`"H"`, `"D"`, ...).
pub fn projector_by_name(label: &str) -> Result<JonesMatrix> {
    label.parse::<Polarization>().map(projector)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Basis {
    HV,
    DA,
    RL,
}

impl Basis {
    pub const ALL: [Basis; 3] = [Basis::HV, Basis::DA, Basis::RL];

    /// The two outcomes, "+1" eigenstate first.
    pub fn outcomes(self) -> [Polarization; 2] {
        match self {
            Basis::HV => [Polarization::H, Polarization::V],
            Basis::DA => [Polarization::D, Polarization::A],
            Basis::RL => [Polarization::R, Polarization::L],
        }
    }
}

impl fmt::Display for Basis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b] = self.outcomes();
        write!(f, "{a}{b}")
    }
}

impl FromStr for Basis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "HV" => Ok(Basis::HV),
            "DA" => Ok(Basis::DA),
            "RL" => Ok(Basis::RL),
            other => Err(Error::UnknownLabel(other.to_string())),
        }
    }
}

/// A pair of analyzer bases (signal, idler).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MeasurementSetting {
    pub signal: Basis,
    pub idler: Basis,
}

impl MeasurementSetting {
    /// The nine settings, signal basis major: HV×HV, HV×DA, ..., RL×RL.
    pub fn all() -> [MeasurementSetting; 9] {
        let mut out = [MeasurementSetting {
            signal: Basis::HV,
            idler: Basis::HV,
        }; 9];
        for (i, s) in Basis::ALL.iter().enumerate() {
            for (j, b) in Basis::ALL.iter().enumerate() {
                out[3 * i + j] = MeasurementSetting {
                    signal: *s,
                    idler: *b,
                };
            }
        }
        out
    }

    /// Outcomes in table order: `(s+, i+), (s+, i-), (s-, i+), (s-, i-)`.
    pub fn outcomes(&self) -> [(Polarization, Polarization); 4] {
        let [s0, s1] = self.signal.outcomes();
        let [i0, i1] = self.idler.outcomes();
        [(s0, i0), (s0, i1), (s1, i0), (s1, i1)]
    }

    pub fn label(&self) -> String {
        format!("{}×{}", self.signal, self.idler)
    }

    pub fn parse_label(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once('×')
            .or_else(|| s.split_once('x'))
            .ok_or_else(|| Error::UnknownLabel(s.to_string()))?;
        Ok(MeasurementSetting {
            signal: a.parse()?,
            idler: b.parse()?,
        })
    }
}

/// Two-photon product ket `|s⟩ ⊗ |i⟩`.
pub fn product_ket(signal: Polarization, idler: Polarization) -> Vector4c {
    kron_vec(&signal.ket(), &idler.ket())
}

/// Born-rule probability `tr(ρ (P_s ⊗ P_i))`.
pub fn born_probability(
    rho: &TwoQubitState,
    signal: Polarization,
    idler: Polarization,
) -> Result<f64> {
    rho.validate()?;
    Ok(rho.expectation(&product_ket(signal, idler)).max(0.0))
}

/// Probabilities of the four outcomes of a setting, in table order.
pub fn setting_probabilities(rho: &TwoQubitState, setting: MeasurementSetting) -> [f64; 4] {
    let mut out = [0.0; 4];
    for (k, (s, i)) in setting.outcomes().into_iter().enumerate() {
        out[k] = rho.expectation(&product_ket(s, i)).max(0.0);
    }
    out
}

/// Polarization state produced by the Sagnac loop.
///
/// The PBS sends the V pump component clockwise and the H component
/// counterclockwise; both are converted to V before the ring, and the ring
/// emits V-polarized pairs. The clockwise pairs are rotated to `|HH⟩` on
/// the way back, the counterclockwise pairs stay `|VV⟩`. Because two pump
/// photons are annihilated per pair, each path's pair amplitude scales with
/// the square of its pump field amplitude:
///
/// `|ψ⟩ ∝ v²|HH⟩ + e^{iθ} h²|VV⟩`.
pub fn sagnac_state(pump: &JonesVector, loop_phase: f64) -> Result<TwoQubitState> {
    let norm = pump.norm();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::InvalidInput(
            "pump polarization has zero norm".into(),
        ));
    }
    let p = pump / C64::new(norm, 0.0);
    let (h, v) = (p[0], p[1]);
    let cw = v * v;
    let ccw = h * h * C64::from_polar(1.0, loop_phase);
    let zero = C64::new(0.0, 0.0);
    TwoQubitState::from_pure(&Vector4c::new(cw, zero, zero, ccw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn equal_up_to_phase(a: &JonesVector, b: &JonesVector) -> bool {
        let overlap = (a.adjoint() * b)[(0, 0)].norm();
        (overlap - a.norm() * b.norm()).abs() < 1e-12
    }

    fn unitarity_defect(j: &JonesMatrix) -> f64 {
        (j.adjoint() * j - JonesMatrix::identity()).norm()
    }

    #[test]
    fn waveplate_convention_anchors() {
        let h = Polarization::H.ket();
        let hwp45 = waveplate(WaveplateKind::Half, FRAC_PI_4);
        assert!(equal_up_to_phase(&(hwp45 * h), &Polarization::V.ket()));
        let hwp0 = waveplate(WaveplateKind::Half, 0.0);
        let diag = JonesMatrix::new(
            C64::new(1.0, 0.0),
            C64::default(),
            C64::default(),
            C64::new(-1.0, 0.0),
        );
        assert!((hwp0 - diag).norm() < 1e-15);
        let qwp45 = waveplate(WaveplateKind::Quarter, FRAC_PI_4);
        assert!(equal_up_to_phase(&(qwp45 * h), &Polarization::R.ket()));
    }

    #[test]
    fn waveplates_are_unitary() {
        for k in 0..200 {
            let a = k as f64 * 0.0317 - 3.0;
            assert!(unitarity_defect(&waveplate(WaveplateKind::Half, a)) < 1e-12);
            assert!(unitarity_defect(&waveplate(WaveplateKind::Quarter, a)) < 1e-12);
        }
    }

    #[test]
    fn compensator_is_diagonal_with_expected_phases() {
        let phi = 0.37;
        let j = compensator(phi);
        assert!(j[(0, 1)].norm() < 1e-12 && j[(1, 0)].norm() < 1e-12);
        let rel = wrap_phase(j[(1, 1)].arg() - j[(0, 0)].arg());
        assert_relative_eq!(rel, wrap_phase(4.0 * phi - PI), epsilon = 1e-12);
    }

    #[test]
    fn compensator_phase_examples() {
        assert!(compensator_phase(PI, 0.0).abs() < 1e-12);
        assert!(compensator_phase(0.0, FRAC_PI_4).abs() < 1e-12);
        // 4(0.2) + 0.3 - π
        assert_relative_eq!(
            compensator_phase(0.3, 0.2),
            -2.041_592_653_589_793,
            epsilon = 1e-12
        );
    }

    #[test]
    fn compensation_angle_examples() {
        assert_relative_eq!(compensation_angle(0.0), FRAC_PI_4, epsilon = 1e-15);
        assert_relative_eq!(compensation_angle(PI), 0.0, epsilon = 1e-15);
        for k in 0..100 {
            let theta = -PI + 2.0 * PI * k as f64 / 100.0;
            let phi = compensation_angle(theta);
            assert!((0.0..FRAC_PI_2).contains(&phi));
            assert!(compensator_phase(theta, phi).abs() < 1e-9);
        }
    }

    #[test]
    fn projector_algebra() {
        let d = Polarization::D.ket();
        let a = Polarization::A.ket();
        assert!((d.adjoint() * a)[(0, 0)].norm() < 1e-15);
        let hd = (Polarization::H.ket().adjoint() * d)[(0, 0)].norm_sqr();
        assert_relative_eq!(hd, 0.5, epsilon = 1e-15);
        for b in Basis::ALL {
            let [x, y] = b.outcomes();
            let sum = projector(x) + projector(y);
            assert!((sum - JonesMatrix::identity()).norm() < 1e-15);
        }
        // mutually unbiased
        for x in Polarization::ALL {
            for y in Polarization::ALL {
                if x.basis() != y.basis() {
                    let o = (x.ket().adjoint() * y.ket())[(0, 0)].norm_sqr();
                    assert_relative_eq!(o, 0.5, epsilon = 1e-15);
                }
            }
        }
        assert!(matches!(
            projector_by_name("X"),
            Err(Error::UnknownLabel(_))
        ));
        assert!(projector_by_name("R").is_ok());
    }

    #[test]
    fn settings_and_labels() {
        let all = MeasurementSetting::all();
        assert_eq!(all.len(), 9);
        assert_eq!(all[1].label(), "HV×DA");
        for s in all {
            assert_eq!(MeasurementSetting::parse_label(&s.label()).unwrap(), s);
        }
    }

    #[test]
    fn sagnac_single_path_is_a_product_state() {
        let rho = sagnac_state(&Polarization::H.ket(), 0.4).unwrap();
        assert!(rho.concurrence() < 1e-7);
        assert_relative_eq!(rho.purity(), 1.0, epsilon = 1e-12);
        assert!(sagnac_state(&JonesVector::zeros(), 0.0).is_err());
    }
}
