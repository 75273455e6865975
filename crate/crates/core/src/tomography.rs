//! Nine-setting polarization tomography: count simulation, linear
//! inversion, maximum-likelihood reconstruction and Bell-state fidelity.
//!
//! Each setting pairs an analyzer basis on the signal photon with one on the
//! idler photon; all four outcomes of a setting are recorded at once, so the
//! table holds 9 × 4 = 36 cells.
//!
//! Maximum likelihood uses `ρ = T†T / tr(T†T)` with `T` lower triangular and
//! a real diagonal, and maximizes the multinomial log-likelihood
//! `L = Σ_c n_c ln(tr(ρ Π_c))` by projected gradient ascent with an
//! Armijo backtracking line search.

use std::collections::BTreeMap;

use nalgebra::Cholesky;
use serde::{Deserialize, Serialize};

use crate::counting::PoissonSampler;
use crate::error::{Error, Result};
use crate::jones::{product_ket, MeasurementSetting};
use crate::pair_source::ideal_ket;
use crate::rng::derive_path;
use crate::state::{project_to_state, Matrix4c, TwoQubitState, Vector4c, C64};

/// Counts for the nine settings (in [`MeasurementSetting::all`] order) and
/// four outcomes (in [`MeasurementSetting::outcomes`] order).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "TableJson", try_from = "TableJson")]
pub struct TomographyTable {
    pub counts: [[u64; 4]; 9],
    /// Expected accidental counts per cell.
    pub accidental_estimate: [[f64; 4]; 9],
    pub integration_time: f64,
}

#[derive(Serialize, Deserialize)]
struct SettingJson {
    setting: String,
    counts: BTreeMap<String, u64>,
    accidentals: BTreeMap<String, f64>,
}

#[derive(Serialize, Deserialize)]
struct TableJson {
    integration_time: f64,
    settings: Vec<SettingJson>,
}

fn outcome_label(setting: &MeasurementSetting, k: usize) -> String {
    let (s, i) = setting.outcomes()[k];
    format!("{s}{i}")
}

impl From<TomographyTable> for TableJson {
    fn from(t: TomographyTable) -> Self {
        let settings = MeasurementSetting::all()
            .iter()
            .enumerate()
            .map(|(j, st)| SettingJson {
                setting: st.label(),
                counts: (0..4)
                    .map(|k| (outcome_label(st, k), t.counts[j][k]))
                    .collect(),
                accidentals: (0..4)
                    .map(|k| (outcome_label(st, k), t.accidental_estimate[j][k]))
                    .collect(),
            })
            .collect();
        TableJson {
            integration_time: t.integration_time,
            settings,
        }
    }
}

impl TryFrom<TableJson> for TomographyTable {
    type Error = Error;

    fn try_from(j: TableJson) -> Result<Self> {
        let order = MeasurementSetting::all();
        let mut counts = [[0u64; 4]; 9];
        let mut acc = [[0.0; 4]; 9];
        let mut seen = [false; 9];
        for entry in &j.settings {
            let st = MeasurementSetting::parse_label(&entry.setting)?;
            let idx = order
                .iter()
                .position(|o| *o == st)
                .expect("all settings enumerated");
            if seen[idx] {
                return Err(Error::InvalidInput(format!(
                    "setting {} listed twice",
                    entry.setting
                )));
            }
            seen[idx] = true;
            for k in 0..4 {
                let label = outcome_label(&st, k);
                counts[idx][k] = *entry.counts.get(&label).ok_or_else(|| {
                    Error::InvalidInput(format!("{}: missing outcome {label}", entry.setting))
                })?;
                acc[idx][k] = entry.accidentals.get(&label).copied().unwrap_or(0.0);
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidInput(format!(
                "setting {} missing",
                order[missing].label()
            )));
        }
        let table = TomographyTable {
            counts,
            accidental_estimate: acc,
            integration_time: j.integration_time,
        };
        table.validate()?;
        Ok(table)
    }
}

impl TomographyTable {
    pub fn validate(&self) -> Result<()> {
        if !(self.integration_time > 0.0) {
            return Err(Error::param("integration_time", "must be positive"));
        }
        if self
            .accidental_estimate
            .iter()
            .flatten()
            .any(|a| !(*a >= 0.0))
        {
            return Err(Error::InvalidInput(
                "accidental estimates must be non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn setting_total(&self, setting: usize) -> u64 {
        self.counts[setting].iter().sum()
    }

    fn as_f64(&self) -> [[f64; 4]; 9] {
        self.counts.map(|row| row.map(|n| n as f64))
    }

    /// Counts with the accidental estimate removed, clamped at zero.
    pub fn subtracted(&self) -> [[f64; 4]; 9] {
        let mut out = self.as_f64();
        for (row, acc) in out.iter_mut().zip(&self.accidental_estimate) {
            for (n, a) in row.iter_mut().zip(acc) {
                *n = (*n - a).max(0.0);
            }
        }
        out
    }
}

/// Samples every cell as Poisson with mean
/// `(total_rate · p_Born + accidental_rate / 4) · time`.
pub fn simulate_tomography(
    rho: &TwoQubitState,
    total_rate: f64,
    accidental_rate: f64,
    time: f64,
    seed: u64,
) -> Result<TomographyTable> {
    rho.validate()?;
    if !(total_rate >= 0.0) || !(accidental_rate >= 0.0) {
        return Err(Error::InvalidInput("rates must be non-negative".into()));
    }
    if !(time > 0.0) {
        return Err(Error::InvalidInput(format!(
            "integration time {time} must be positive"
        )));
    }
    let mut counts = [[0u64; 4]; 9];
    let acc_cell = accidental_rate * time / 4.0;
    for (j, setting) in MeasurementSetting::all().iter().enumerate() {
        for (k, (s, i)) in setting.outcomes().into_iter().enumerate() {
            let p = rho.expectation(&product_ket(s, i)).max(0.0);
            let mean = total_rate * p * time + acc_cell;
            let mut sampler = PoissonSampler::new(derive_path(seed, &[j as u64, k as u64]));
            counts[j][k] = sampler.draw(mean)?;
        }
    }
    Ok(TomographyTable {
        counts,
        accidental_estimate: [[acc_cell; 4]; 9],
        integration_time: time,
    })
}

fn cell_kets() -> [[Vector4c; 4]; 9] {
    MeasurementSetting::all().map(|st| st.outcomes().map(|(s, i)| product_ket(s, i)))
}

fn check_counts(counts: &[[f64; 4]; 9]) -> Result<()> {
    for (j, row) in counts.iter().enumerate() {
        if row.iter().any(|n| !(*n >= 0.0) || !n.is_finite()) {
            return Err(Error::InvalidInput(
                "counts must be finite and non-negative".into(),
            ));
        }
        if row.iter().sum::<f64>() <= 0.0 {
            return Err(Error::ReconstructionFailed(format!(
                "setting {} has no counts",
                MeasurementSetting::all()[j].label()
            )));
        }
    }
    Ok(())
}

fn pauli(index: usize) -> nalgebra::Matrix2<C64> {
    let (z, o, i) = (C64::new(0.0, 0.0), C64::new(1.0, 0.0), C64::new(0.0, 1.0));
    match index {
        0 => nalgebra::Matrix2::new(o, z, z, o),
        1 => nalgebra::Matrix2::new(z, o, o, z),
        2 => nalgebra::Matrix2::new(z, -i, i, z),
        _ => nalgebra::Matrix2::new(o, z, z, -o),
    }
}

/// Pauli index (X = 1, Y = 2, Z = 3) measured by each analyzer basis, in
/// `Basis::ALL` order; the first outcome is the +1 eigenstate.
const BASIS_PAULI: [usize; 3] = [3, 1, 2];

/// Linear-inversion estimate (Stokes reconstruction). May be unphysical.
pub fn linear_inversion_matrix(counts: &[[f64; 4]; 9]) -> Result<Matrix4c> {
    check_counts(counts)?;
    let freq: Vec<[f64; 4]> = counts
        .iter()
        .map(|row| {
            let n: f64 = row.iter().sum();
            row.map(|c| c / n)
        })
        .collect();
    let mut stokes = [[0.0; 4]; 4];
    stokes[0][0] = 1.0;
    for (j, f) in freq.iter().enumerate() {
        let (bs, bi) = (BASIS_PAULI[j / 3], BASIS_PAULI[j % 3]);
        stokes[bs][bi] = f[0] - f[1] - f[2] + f[3];
        // local terms averaged over the three settings sharing the basis
        stokes[bs][0] += (f[0] + f[1] - f[2] - f[3]) / 3.0;
        stokes[0][bi] += (f[0] - f[1] + f[2] - f[3]) / 3.0;
    }
    let mut rho = Matrix4c::zeros();
    for (a, row) in stokes.iter().enumerate() {
        for (b, s) in row.iter().enumerate() {
            rho += crate::state::kron(&pauli(a), &pauli(b)) * C64::new(s / 4.0, 0.0);
        }
    }
    Ok(rho)
}

/// Linear inversion followed by projection onto the physical states.
pub fn linear_inversion(table: &TomographyTable) -> Result<TwoQubitState> {
    project_to_state(&linear_inversion_matrix(&table.as_f64())?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MleOptions {
    pub max_iterations: usize,
    /// Stop when `|ΔL| / |L|` falls below this.
    pub relative_tolerance: f64,
}

impl Default for MleOptions {
    fn default() -> Self {
        Self {
            max_iterations: 10_000,
            relative_tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MleReport {
    pub state: TwoQubitState,
    /// Log-likelihood after initialization and after each accepted step.
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

struct Likelihood {
    kets: [[Vector4c; 4]; 9],
    counts: [[f64; 4]; 9],
    total: f64,
}

impl Likelihood {
    /// `L(T)` with `A = T†T`; `-inf` when a counted cell has zero weight.
    fn value(&self, t: &Matrix4c) -> f64 {
        let a = t.adjoint() * t;
        let tr = a.trace().re;
        let mut l = -self.total * tr.ln();
        for (kets, counts) in self.kets.iter().zip(&self.counts) {
            for (k, n) in kets.iter().zip(counts) {
                if *n > 0.0 {
                    let p = (k.adjoint() * a * k)[(0, 0)].re;
                    if p <= 0.0 {
                        return f64::NEG_INFINITY;
                    }
                    l += n * p.ln();
                }
            }
        }
        l
    }

    /// Ascent direction in `T`, restricted to the lower triangle with a real
    /// diagonal.
    fn direction(&self, t: &Matrix4c) -> Matrix4c {
        let a = t.adjoint() * t;
        let tr = a.trace().re;
        let mut g = Matrix4c::identity() * C64::new(-self.total / tr, 0.0);
        for (kets, counts) in self.kets.iter().zip(&self.counts) {
            for (k, n) in kets.iter().zip(counts) {
                if *n > 0.0 {
                    let p = (k.adjoint() * a * k)[(0, 0)].re.max(f64::MIN_POSITIVE);
                    g += k * k.adjoint() * C64::new(n / p, 0.0);
                }
            }
        }
        restrict(&(t * g * C64::new(2.0, 0.0)))
    }
}

fn restrict(m: &Matrix4c) -> Matrix4c {
    Matrix4c::from_fn(|r, c| match r.cmp(&c) {
        std::cmp::Ordering::Greater => m[(r, c)],
        std::cmp::Ordering::Equal => C64::new(m[(r, c)].re, 0.0),
        std::cmp::Ordering::Less => C64::new(0.0, 0.0),
    })
}

fn inner(a: &Matrix4c, b: &Matrix4c) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x.conj() * y).re).sum()
}

/// Lower-triangular `T` with `T†T = a` for Hermitian positive-definite `a`.
fn lower_factor(a: &Matrix4c) -> Result<Matrix4c> {
    let j = Matrix4c::from_fn(|r, c| {
        if r + c == 3 {
            C64::new(1.0, 0.0)
        } else {
            C64::new(0.0, 0.0)
        }
    });
    let chol = Cholesky::new(j * a * j).ok_or_else(|| {
        Error::ReconstructionFailed("initial estimate not positive definite".into())
    })?;
    let l = chol.l();
    Ok((j * l * j).adjoint())
}

fn normalize(t: &Matrix4c) -> Matrix4c {
    let n = t.norm();
    t / C64::new(n, 0.0)
}

/// Maximum-likelihood reconstruction from (possibly non-integer) counts.
pub fn mle_from_counts(counts: &[[f64; 4]; 9], opts: &MleOptions) -> Result<MleReport> {
    check_counts(counts)?;
    let lik = Likelihood {
        kets: cell_kets(),
        counts: *counts,
        total: counts.iter().flatten().sum(),
    };
    let init = project_to_state(&linear_inversion_matrix(counts)?)?;
    let start = init.mix(&TwoQubitState::maximally_mixed(), 0.99)?;
    let mut t = normalize(&lower_factor(start.matrix())?);
    let mut l = lik.value(&t);
    if !l.is_finite() {
        return Err(Error::ReconstructionFailed(
            "initial log-likelihood is not finite".into(),
        ));
    }
    let mut trace = vec![l];
    let mut d = lik.direction(&t);
    let mut step = 0.01 / d.norm().max(f64::MIN_POSITIVE);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iterations {
        iterations += 1;
        let slope = inner(&d, &d);
        if slope == 0.0 {
            converged = true;
            break;
        }
        let mut alpha = step;
        let mut accepted = None;
        for _ in 0..60 {
            let cand = normalize(&(t + d * C64::new(alpha, 0.0)));
            let lc = lik.value(&cand);
            // Armijo condition on the unnormalized step; L is scale invariant.
            if lc.is_finite() && lc >= l + 1e-4 * alpha * slope {
                accepted = Some((cand, lc));
                break;
            }
            alpha *= 0.5;
        }
        let Some((t_new, l_new)) = accepted else {
            converged = true;
            break;
        };
        let d_new = lik.direction(&t_new);
        let s = t_new - t;
        let y = d - d_new;
        let sy = inner(&s, &y);
        step = if sy > 0.0 {
            inner(&s, &s) / sy
        } else {
            2.0 * alpha
        };
        let rel = (l_new - l).abs() / l.abs().max(f64::MIN_POSITIVE);
        t = t_new;
        l = l_new;
        d = d_new;
        trace.push(l);
        if rel < opts.relative_tolerance {
            converged = true;
            break;
        }
    }
    let state = TwoQubitState::from_unnormalized(t.adjoint() * t)?;
    Ok(MleReport {
        state,
        log_likelihood: trace,
        iterations,
        converged,
    })
}

pub fn mle_reconstruct_with_report(table: &TomographyTable) -> Result<MleReport> {
    table.validate()?;
    mle_from_counts(&table.as_f64(), &MleOptions::default())
}

pub fn mle_reconstruct(table: &TomographyTable) -> Result<TwoQubitState> {
    Ok(mle_reconstruct_with_report(table)?.state)
}

/// `⟨ψ(θ)|ρ|ψ(θ)⟩` with `|ψ(θ)⟩ = (|HH⟩ + e^{iθ}|VV⟩)/√2`.
pub fn fidelity(rho: &TwoQubitState, theta: f64) -> f64 {
    rho.expectation(&ideal_ket(theta)).clamp(0.0, 1.0)
}

/// Fidelity maximized over the target phase: `(ρ₀₀ + ρ₃₃)/2 + |ρ₀₃|`.
pub fn fidelity_best_phase(rho: &TwoQubitState) -> (f64, f64) {
    let m = rho.matrix();
    let c = m[(0, 3)];
    // ⟨ψ(θ)|ρ|ψ(θ)⟩ = (ρ00 + ρ33)/2 + Re(ρ03 e^{iθ})
    let theta = -c.arg();
    let f = 0.5 * (m[(0, 0)].re + m[(3, 3)].re) + c.norm();
    (f.clamp(0.0, 1.0), theta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetFidelity {
    pub raw: f64,
    pub net: f64,
}

/// Raw fidelity and fidelity after cell-wise accidental subtraction, both
/// against `ψ(theta)`.
pub fn net_fidelity_at(table: &TomographyTable, theta: f64) -> Result<NetFidelity> {
    table.validate()?;
    let raw = mle_from_counts(&table.as_f64(), &MleOptions::default())?.state;
    let net = mle_from_counts(&table.subtracted(), &MleOptions::default())?.state;
    Ok(NetFidelity {
        raw: fidelity(&raw, theta),
        net: fidelity(&net, theta),
    })
}

pub fn net_fidelity(table: &TomographyTable) -> Result<NetFidelity> {
    net_fidelity_at(table, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pair_source::{ideal_state, noisy_state};
    use approx::assert_relative_eq;

    fn exact_table(rho: &TwoQubitState, n: f64) -> [[f64; 4]; 9] {
        MeasurementSetting::all()
            .map(|st| crate::jones::setting_probabilities(rho, st).map(|p| p * n))
    }

    #[test]
    fn zero_probability_cells_are_empty() {
        let t = simulate_tomography(&ideal_state(0.0), 1e4, 0.0, 10.0, 3).unwrap();
        // DA×DA is setting 4; DA and AD outcomes are cells 1 and 2
        assert_eq!(t.counts[4][1], 0);
        assert_eq!(t.counts[4][2], 0);
        for j in 0..9 {
            let n = t.setting_total(j) as f64;
            assert!((n - 1e5).abs() < 3.0 * 1e5f64.sqrt(), "setting {j}: {n}");
        }
    }

    #[test]
    fn linear_inversion_is_exact_on_exact_data() {
        let rho = noisy_state(0.4, 0.7).unwrap();
        let est = linear_inversion_matrix(&exact_table(&rho, 1.0)).unwrap();
        assert!((est - rho.matrix()).norm() < 1e-12);
    }

    #[test]
    fn high_statistics_bell_state() {
        let rep =
            mle_from_counts(&exact_table(&ideal_state(0.0), 1e7), &MleOptions::default()).unwrap();
        assert!(
            fidelity(&rep.state, 0.0) > 0.999,
            "{}",
            fidelity(&rep.state, 0.0)
        );
        assert!(rep.log_likelihood.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn maximally_mixed_table() {
        let t = simulate_tomography(&TwoQubitState::maximally_mixed(), 1e4, 0.0, 10.0, 11).unwrap();
        let f = fidelity(&mle_reconstruct(&t).unwrap(), 0.0);
        assert!((f - 0.25).abs() < 0.01, "{f}");
    }

    #[test]
    fn empty_setting_fails() {
        let mut t = simulate_tomography(&ideal_state(0.0), 1e3, 10.0, 1.0, 5).unwrap();
        t.counts[2] = [0; 4];
        assert!(matches!(
            mle_reconstruct(&t),
            Err(Error::ReconstructionFailed(_))
        ));
    }

    #[test]
    fn fidelity_examples() {
        assert_relative_eq!(fidelity(&ideal_state(0.0), 0.0), 1.0, epsilon = 1e-12);
        assert_relative_eq!(
            fidelity(&TwoQubitState::maximally_mixed(), 0.0),
            0.25,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            fidelity(&noisy_state(0.0, 0.9).unwrap(), 0.0),
            0.925,
            epsilon = 1e-12
        );
        for k in 0..16 {
            let th = -3.0 + 0.4 * k as f64;
            assert_relative_eq!(
                fidelity(&ideal_state(th), 0.0),
                (1.0 + th.cos()) / 2.0,
                epsilon = 1e-12
            );
            let (best, phase) = fidelity_best_phase(&ideal_state(th));
            assert_relative_eq!(best, 1.0, epsilon = 1e-12);
            assert_relative_eq!(fidelity(&ideal_state(th), phase), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn accidental_subtraction_raises_fidelity() {
        let t = simulate_tomography(&ideal_state(0.0), 2e3, 600.0, 100.0, 9).unwrap();
        let nf = net_fidelity(&t).unwrap();
        assert!(nf.net > nf.raw, "{nf:?}");
        let clean = simulate_tomography(&ideal_state(0.0), 2e3, 0.0, 100.0, 9).unwrap();
        let nf = net_fidelity(&clean).unwrap();
        assert_eq!(nf.raw, nf.net);
    }

    #[test]
    fn json_round_trip() {
        let t = simulate_tomography(&ideal_state(0.3), 1e3, 50.0, 2.0, 1).unwrap();
        let s = serde_json::to_string(&t).unwrap();
        assert!(s.contains("\"HV×DA\"") && s.contains("\"DD\""));
        let back: TomographyTable = serde_json::from_str(&s).unwrap();
        assert_eq!(back, t);
    }
}
