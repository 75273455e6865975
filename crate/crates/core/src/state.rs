//! Two-qubit polarization density matrices over the ordered basis
//! `{HH, HV, VH, VV}` (signal qubit first).

use nalgebra::{Complex, Matrix2, Matrix4, SymmetricEigen, Vector4};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub type C64 = Complex<f64>;
pub type Matrix4c = Matrix4<C64>;
pub type Vector4c = Vector4<C64>;

/// Tolerance applied to the trace, Hermiticity and positivity checks.
pub const STATE_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct TwoQubitState {
    rho: Matrix4c,
}

impl TwoQubitState {
    /// Wraps `rho` after checking Hermiticity, unit trace and positivity.
    pub fn new(rho: Matrix4c) -> Result<Self> {
        let state = Self { rho };
        state.validate()?;
        Ok(state)
    }

    /// Builds a state from a (possibly unnormalized) Hermitian PSD matrix by
    /// dividing by its trace.
    pub fn from_unnormalized(a: Matrix4c) -> Result<Self> {
        let tr = a.trace().re;
        if !(tr > 0.0) || !tr.is_finite() {
            return Err(Error::InvalidState(format!("trace {tr} is not positive")));
        }
        let mut rho = a / C64::new(tr, 0.0);
        rho = (rho + rho.adjoint()) * C64::new(0.5, 0.0);
        Self::new(rho)
    }

    pub fn from_pure(psi: &Vector4c) -> Result<Self> {
        let norm = psi.norm();
        if !(norm > 0.0) {
            return Err(Error::InvalidState("zero state vector".into()));
        }
        let v = psi / C64::new(norm, 0.0);
        Self::new(v * v.adjoint())
    }

    pub fn maximally_mixed() -> Self {
        Self {
            rho: Matrix4c::identity() * C64::new(0.25, 0.0),
        }
    }

    pub fn matrix(&self) -> &Matrix4c {
        &self.rho
    }

    pub fn trace(&self) -> f64 {
        self.rho.trace().re
    }

    pub fn purity(&self) -> f64 {
        (self.rho * self.rho).trace().re
    }

    pub fn eigenvalues(&self) -> [f64; 4] {
        let eig = SymmetricEigen::new(self.rho);
        let mut v = [0.0; 4];
        v.copy_from_slice(eig.eigenvalues.as_slice());
        v.sort_by(|a, b| a.total_cmp(b));
        v
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues()[0]
    }

    pub fn validate(&self) -> Result<()> {
        if self
            .rho
            .iter()
            .any(|z| !z.re.is_finite() || !z.im.is_finite())
        {
            return Err(Error::InvalidState("non-finite entry".into()));
        }
        let herm = (self.rho - self.rho.adjoint()).norm();
        if herm > STATE_TOLERANCE {
            return Err(Error::InvalidState(format!(
                "not Hermitian (|rho - rho^H| = {herm:e})"
            )));
        }
        let tr = self.rho.trace();
        if (tr.re - 1.0).abs() > STATE_TOLERANCE || tr.im.abs() > STATE_TOLERANCE {
            return Err(Error::InvalidState(format!("trace {tr} differs from 1")));
        }
        let min = self.min_eigenvalue();
        if min < -STATE_TOLERANCE {
            return Err(Error::InvalidState(format!("negative eigenvalue {min:e}")));
        }
        Ok(())
    }

    /// `<psi|rho|psi>` for a normalized pure target.
    pub fn expectation(&self, psi: &Vector4c) -> f64 {
        (psi.adjoint() * self.rho * psi)[(0, 0)].re
    }

    /// Uhlmann fidelity `(tr sqrt(sqrt(rho) sigma sqrt(rho)))^2`.
    pub fn fidelity_to(&self, other: &TwoQubitState) -> f64 {
        let s = psd_sqrt(&self.rho);
        let inner = s * other.rho * s;
        let eig = SymmetricEigen::new((inner + inner.adjoint()) * C64::new(0.5, 0.0));
        let t: f64 = eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
        (t * t).clamp(0.0, 1.0)
    }

    /// Wootters concurrence.
    pub fn concurrence(&self) -> f64 {
        let yy = pauli_y_y();
        let tilde = yy * self.rho.conjugate() * yy;
        let s = psd_sqrt(&self.rho);
        let r = s * tilde * s;
        let eig = SymmetricEigen::new((r + r.adjoint()) * C64::new(0.5, 0.0));
        let mut l: Vec<f64> = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).collect();
        l.sort_by(|a, b| b.total_cmp(a));
        (l[0] - l[1] - l[2] - l[3]).max(0.0)
    }

    /// Applies local unitaries: `(U_s ⊗ U_i) rho (U_s ⊗ U_i)^H`.
    pub fn apply_local(&self, signal: &Matrix2<C64>, idler: &Matrix2<C64>) -> Result<Self> {
        let u = kron(signal, idler);
        let out = u * self.rho * u.adjoint();
        Self::from_unnormalized((out + out.adjoint()) * C64::new(0.5, 0.0))
    }

    /// Convex mixture `p * self + (1 - p) * other`.
    pub fn mix(&self, other: &TwoQubitState, p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::param(
                "p",
                format!("mixing weight {p} outside [0, 1]"),
            ));
        }
        Self::new(self.rho * C64::new(p, 0.0) + other.rho * C64::new(1.0 - p, 0.0))
    }

    /// Row-major `[re, im]` pairs, 16 entries.
    pub fn to_pairs(&self) -> Vec<[f64; 2]> {
        let mut out = Vec::with_capacity(16);
        for r in 0..4 {
            for c in 0..4 {
                let z = self.rho[(r, c)];
                out.push([z.re, z.im]);
            }
        }
        out
    }

    pub fn from_pairs(pairs: &[[f64; 2]]) -> Result<Self> {
        if pairs.len() != 16 {
            return Err(Error::InvalidInput(format!(
                "expected 16 complex entries, found {}",
                pairs.len()
            )));
        }
        let rho = Matrix4c::from_fn(|r, c| {
            let [re, im] = pairs[r * 4 + c];
            C64::new(re, im)
        });
        Self::new(rho)
    }
}

impl Serialize for TwoQubitState {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_pairs().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for TwoQubitState {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let pairs = Vec::<[f64; 2]>::deserialize(deserializer)?;
        TwoQubitState::from_pairs(&pairs).map_err(serde::de::Error::custom)
    }
}

pub fn kron(a: &Matrix2<C64>, b: &Matrix2<C64>) -> Matrix4c {
    Matrix4c::from_fn(|r, c| a[(r / 2, c / 2)] * b[(r % 2, c % 2)])
}

pub fn kron_vec(a: &nalgebra::Vector2<C64>, b: &nalgebra::Vector2<C64>) -> Vector4c {
    Vector4c::from_fn(|r, _| a[r / 2] * b[r % 2])
}

fn pauli_y_y() -> Matrix4c {
    let y = Matrix2::new(
        C64::new(0.0, 0.0),
        C64::new(0.0, -1.0),
        C64::new(0.0, 1.0),
        C64::new(0.0, 0.0),
    );
    kron(&y, &y)
}

/// Square root of a Hermitian PSD matrix; small negative eigenvalues are clipped.
pub fn psd_sqrt(a: &Matrix4c) -> Matrix4c {
    let eig = SymmetricEigen::new((a + a.adjoint()) * C64::new(0.5, 0.0));
    let mut out = Matrix4c::zeros();
    for k in 0..4 {
        let l = eig.eigenvalues[k].max(0.0).sqrt();
        let v = eig.eigenvectors.column(k);
        out += v * v.adjoint() * C64::new(l, 0.0);
    }
    out
}

/// Random density matrix of the given rank (1..=4) from the induced
/// Ginibre ensemble: `ρ = G G† / tr`, `G` a 4×rank complex Gaussian matrix.
/// Rank 1 gives Haar-random pure states.
pub fn random_state<R: rand::Rng + ?Sized>(rng: &mut R, rank: usize) -> Result<TwoQubitState> {
    if !(1..=4).contains(&rank) {
        return Err(Error::param("rank", format!("{rank} outside 1..=4")));
    }
    let mut a = Matrix4c::zeros();
    for _ in 0..rank {
        let g = Vector4c::from_fn(|_, _| {
            C64::new(
                rng.sample(rand_distr::StandardNormal),
                rng.sample(rand_distr::StandardNormal),
            )
        });
        a += g * g.adjoint();
    }
    TwoQubitState::from_unnormalized(a)
}

/// Projects a Hermitian matrix onto the set of density matrices by clipping
/// negative eigenvalues and renormalizing.
pub fn project_to_state(a: &Matrix4c) -> Result<TwoQubitState> {
    let eig = SymmetricEigen::new((a + a.adjoint()) * C64::new(0.5, 0.0));
    let mut out = Matrix4c::zeros();
    for k in 0..4 {
        let l = eig.eigenvalues[k].max(0.0);
        let v = eig.eigenvectors.column(k);
        out += v * v.adjoint() * C64::new(l, 0.0);
    }
    TwoQubitState::from_unnormalized(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn bell() -> Vector4c {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        Vector4c::new(
            C64::new(s, 0.0),
            C64::default(),
            C64::default(),
            C64::new(s, 0.0),
        )
    }

    #[test]
    fn bell_state_properties() {
        let rho = TwoQubitState::from_pure(&bell()).unwrap();
        assert_relative_eq!(rho.purity(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(rho.concurrence(), 1.0, epsilon = 1e-7);
        assert_relative_eq!(rho.expectation(&bell()), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn mixed_state_fidelity_against_pure_matches_expectation() {
        let rho = TwoQubitState::from_pure(&bell())
            .unwrap()
            .mix(&TwoQubitState::maximally_mixed(), 0.6)
            .unwrap();
        let target = TwoQubitState::from_pure(&bell()).unwrap();
        assert_relative_eq!(
            rho.fidelity_to(&target),
            rho.expectation(&bell()),
            epsilon = 1e-9
        );
        assert_relative_eq!(rho.expectation(&bell()), 0.6 + 0.4 / 4.0, epsilon = 1e-12);
    }

    #[test]
    fn rejects_non_physical() {
        let mut m = Matrix4c::identity() * C64::new(0.25, 0.0);
        m[(0, 0)] = C64::new(0.5, 0.0);
        assert!(TwoQubitState::new(m).is_err());
        let mut m = Matrix4c::zeros();
        m[(0, 0)] = C64::new(1.5, 0.0);
        m[(1, 1)] = C64::new(-0.5, 0.0);
        assert!(matches!(TwoQubitState::new(m), Err(Error::InvalidState(_))));
    }

    #[test]
    fn json_round_trip() {
        let rho = TwoQubitState::from_pure(&bell()).unwrap();
        let text = serde_json::to_string(&rho).unwrap();
        let back: TwoQubitState = serde_json::from_str(&text).unwrap();
        assert_eq!(rho, back);
        assert_eq!(rho.to_pairs().len(), 16);
    }
}
