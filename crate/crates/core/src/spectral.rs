//! Power-dependence fits, on/off-resonance classification, pair-rate
//! figures of merit, the joint spectral intensity grid and the loss budget.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::counting::PoissonSampler;
use crate::error::{Error, Result};
use crate::pair_source::{expected_coincidences, ChannelRateModel};
use crate::rng::derive_path;

/// Detected counts of one comb line versus pump power.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerSeries {
    /// `(power mW, counts s⁻¹)`.
    pub points: Vec<(f64, f64)>,
    pub channel_frequency: f64,
    /// Filled in by classification.
    #[serde(default)]
    pub resonant: Option<bool>,
}

impl PowerSeries {
    pub fn validate(&self) -> Result<()> {
        if self.points.len() < 4 {
            return Err(Error::InvalidInput(format!(
                "power series has {} points; a three-term fit needs at least 4",
                self.points.len()
            )));
        }
        let mut powers: Vec<f64> = self.points.iter().map(|p| p.0).collect();
        if powers.iter().any(|p| !(*p > 0.0) || !p.is_finite()) {
            return Err(Error::InvalidInput("powers must be positive".into()));
        }
        if self.points.iter().any(|p| !p.1.is_finite()) {
            return Err(Error::InvalidInput("counts must be finite".into()));
        }
        powers.sort_by(f64::total_cmp);
        if powers.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidInput("powers must be distinct".into()));
        }
        Ok(())
    }
}

/// `counts = a P² + b P + c` with `a, b, c ≥ 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// Standard errors from the unconstrained design covariance scaled by
    /// the residual variance of the constrained fit.
    pub sigma_a: f64,
    pub sigma_b: f64,
    pub sigma_c: f64,
    pub residual_sum_squares: f64,
}

fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Option<DVector<f64>> {
    x.clone().svd(true, true).solve(y, 1e-14).ok()
}

/// Non-negative least squares by exhaustive search over the 2³ active sets.
pub fn fit_power_quadratic(series: &PowerSeries) -> Result<PowerFit> {
    series.validate()?;
    let n = series.points.len();
    let design = DMatrix::from_fn(n, 3, |r, c| series.points[r].0.powi(2 - c as i32));
    let y = DVector::from_iterator(n, series.points.iter().map(|p| p.1));
    let mut best: Option<([f64; 3], f64)> = None;
    for mask in 0u8..8 {
        let cols: Vec<usize> = (0..3).filter(|c| mask & (1 << c) != 0).collect();
        let mut coef = [0.0; 3];
        if !cols.is_empty() {
            let sub = DMatrix::from_fn(n, cols.len(), |r, k| design[(r, cols[k])]);
            let Some(sol) = least_squares(&sub, &y) else {
                continue;
            };
            if sol.iter().any(|v| *v < 0.0) {
                continue;
            }
            for (k, &c) in cols.iter().enumerate() {
                coef[c] = sol[k];
            }
        }
        let pred = &design * DVector::from_column_slice(&coef);
        let sse = (&y - pred).norm_squared();
        if best.as_ref().is_none_or(|(_, b)| sse < *b) {
            best = Some((coef, sse));
        }
    }
    let (coef, sse) = best.ok_or_else(|| Error::FitFailure("no feasible power fit".into()))?;
    let dof = (n - 3).max(1) as f64;
    let s2 = sse / dof;
    let cov = (design.transpose() * &design)
        .try_inverse()
        .ok_or_else(|| Error::FitFailure("power design matrix is singular".into()))?;
    let se = |k: usize| (s2 * cov[(k, k)]).max(0.0).sqrt();
    Ok(PowerFit {
        a: coef[0],
        b: coef[1],
        c: coef[2],
        sigma_a: se(0),
        sigma_b: se(1),
        sigma_c: se(2),
        residual_sum_squares: sse,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifyConfig {
    /// `a` must exceed this many standard errors.
    pub a_significance: f64,
    /// `b` must exceed this multiple of the off-resonance reference.
    pub b_factor: f64,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        Self {
            a_significance: 2.0,
            b_factor: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelFit {
    pub channel_frequency: f64,
    pub fit: PowerFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    /// One flag per input fit, in input order.
    pub resonant: Vec<bool>,
    /// Reference linear coefficient used for the `b` test.
    pub reference_b: f64,
}

impl Classification {
    pub fn on(&self) -> Vec<usize> {
        (0..self.resonant.len())
            .filter(|&k| self.resonant[k])
            .collect()
    }

    pub fn off(&self) -> Vec<usize> {
        (0..self.resonant.len())
            .filter(|&k| !self.resonant[k])
            .collect()
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// On-resonance iff `a > k σ_a` and `b > factor × reference`, where the
/// reference is the median `b` over channels without a significant `a`
/// (all channels if every `a` is significant).
pub fn classify_resonant(fits: &[ChannelFit], cfg: &ClassifyConfig) -> Result<Classification> {
    if fits.len() < 2 {
        return Err(Error::InvalidInput(
            "classification needs at least two channels".into(),
        ));
    }
    let significant: Vec<bool> = fits
        .iter()
        .map(|f| f.fit.a > cfg.a_significance * f.fit.sigma_a)
        .collect();
    let mut quiet: Vec<f64> = fits
        .iter()
        .zip(&significant)
        .filter(|(_, s)| !**s)
        .map(|(f, _)| f.fit.b)
        .collect();
    if quiet.is_empty() {
        quiet = fits.iter().map(|f| f.fit.b).collect();
    }
    let reference_b = median(&mut quiet);
    let resonant = fits
        .iter()
        .zip(&significant)
        .map(|(f, s)| *s && f.fit.b > cfg.b_factor * reference_b)
        .collect();
    Ok(Classification {
        resonant,
        reference_b,
    })
}

/// Intrinsic pair generation rate `R_s R_i / R_c` from the quadratic
/// coefficients of the signal singles, idler singles and coincidences.
pub fn pgr(rs: f64, ri: f64, rc: f64) -> Result<f64> {
    if rc == 0.0 {
        return Err(Error::DivisionUndefined("pair generation rate"));
    }
    Ok(rs * ri / rc)
}

/// Pair generation rate per MHz of bandwidth.
pub fn spectral_brightness(pgr: f64, bandwidth_mhz: f64) -> Result<f64> {
    if bandwidth_mhz == 0.0 {
        return Err(Error::DivisionUndefined("spectral brightness"));
    }
    if !(bandwidth_mhz > 0.0) {
        return Err(Error::InvalidInput(format!(
            "bandwidth {bandwidth_mhz} MHz must be positive"
        )));
    }
    Ok(pgr / bandwidth_mhz)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Efficiencies {
    pub eta_s: f64,
    pub eta_i: f64,
    pub extraction_s: f64,
    pub extraction_i: f64,
    /// False when an extraction efficiency exceeds 1.
    pub consistent: bool,
}

/// Collection efficiencies `η_s = R_c/R_i`, `η_i = R_c/R_s` and the
/// extraction efficiencies left after removing transmission and detection.
pub fn efficiencies(
    rs: f64,
    ri: f64,
    rc: f64,
    transmission_s: f64,
    transmission_i: f64,
    detection: f64,
) -> Result<Efficiencies> {
    if !(rs > 0.0) || !(ri > 0.0) {
        return Err(Error::InvalidInput(
            "singles coefficients must be positive".into(),
        ));
    }
    for (name, v) in [
        ("transmission_s", transmission_s),
        ("transmission_i", transmission_i),
        ("detection", detection),
    ] {
        if !(v > 0.0 && v <= 1.0) {
            return Err(Error::param(name, format!("{v} outside (0, 1]")));
        }
    }
    let eta_s = rc / ri;
    let eta_i = rc / rs;
    let extraction_s = eta_s / (transmission_s * detection);
    let extraction_i = eta_i / (transmission_i * detection);
    let consistent = extraction_s <= 1.0 && extraction_i <= 1.0;
    if !consistent {
        log::warn!(
            "extraction efficiency above unity (signal {extraction_s:.3}, idler {extraction_i:.3}); inputs violate the loss budget"
        );
    }
    Ok(Efficiencies {
        eta_s,
        eta_i,
        extraction_s,
        extraction_i,
        consistent,
    })
}

/// Coincidence rates for every signal channel × idler channel combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsiGrid {
    /// `rates[j][k]`: signal channel `j + 1`, idler channel `k + 1`, s⁻¹.
    pub rates: Vec<Vec<f64>>,
    pub integration_time: f64,
}

impl JsiGrid {
    pub fn size(&self) -> usize {
        self.rates.len()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.size()).map(|k| self.rates[k][k]).collect()
    }

    pub fn max_off_diagonal(&self) -> f64 {
        let n = self.size();
        let mut m = 0.0f64;
        for j in 0..n {
            for k in 0..n {
                if j != k {
                    m = m.max(self.rates[j][k]);
                }
            }
        }
        m
    }

    /// `min(diagonal) / max(off-diagonal)`; `None` when no off-diagonal
    /// counts were recorded.
    pub fn dominance(&self) -> Option<f64> {
        let off = self.max_off_diagonal();
        let min_diag = self.diagonal().into_iter().fold(f64::INFINITY, f64::min);
        (off > 0.0).then(|| min_diag / off)
    }

    /// Total recorded counts.
    pub fn total_counts(&self) -> f64 {
        self.rates.iter().flatten().sum::<f64>() * self.integration_time
    }
}

/// Samples the JSI at pump power `power`. Diagonal cells carry the true
/// pair rate of their channel plus `cross_accidental_rate`; off-diagonal
/// cells carry only `cross_accidental_rate`.
pub fn jsi(
    models: &[ChannelRateModel],
    power: f64,
    cross_accidental_rate: f64,
    time: f64,
    seed: u64,
) -> Result<JsiGrid> {
    if models.is_empty() {
        return Err(Error::InvalidInput("JSI needs at least one channel".into()));
    }
    if !(cross_accidental_rate >= 0.0) {
        return Err(Error::InvalidInput(
            "accidental rate must be non-negative".into(),
        ));
    }
    if !(time > 0.0) {
        return Err(Error::InvalidInput(format!(
            "integration time {time} must be positive"
        )));
    }
    let n = models.len();
    let mut rates = vec![vec![0.0; n]; n];
    for j in 0..n {
        let true_rate = expected_coincidences(&models[j], power)?.true_rate;
        for (k, cell) in rates[j].iter_mut().enumerate() {
            let rate = if j == k {
                true_rate + cross_accidental_rate
            } else {
                cross_accidental_rate
            };
            let mut s = PoissonSampler::new(derive_path(seed, &[j as u64, k as u64]));
            *cell = s.draw(rate * time)? as f64 / time;
        }
    }
    Ok(JsiGrid {
        rates,
        integration_time: time,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn series(a: f64, b: f64, c: f64) -> PowerSeries {
        PowerSeries {
            points: (1..=10)
                .map(|k| {
                    let p = 0.2 * k as f64;
                    (p, a * p * p + b * p + c)
                })
                .collect(),
            channel_frequency: 193.896e12,
            resonant: None,
        }
    }

    #[test]
    fn noiseless_fit_is_exact() {
        let f = fit_power_quadratic(&series(3.90e3, 8.12e3, 500.0)).unwrap();
        assert_relative_eq!(f.a, 3.90e3, max_relative = 1e-9);
        assert_relative_eq!(f.b, 8.12e3, max_relative = 1e-9);
        assert_relative_eq!(f.c, 500.0, max_relative = 1e-6);
    }

    #[test]
    fn linear_data_pins_a_at_zero() {
        let mut s = series(0.0, 1.2e3, 400.0);
        // a slight concave bend drives unconstrained a negative
        for (p, y) in s.points.iter_mut() {
            *y -= 30.0 * *p * *p;
        }
        let f = fit_power_quadratic(&s).unwrap();
        assert_eq!(f.a, 0.0);
        assert!(f.b > 0.0);
    }

    #[test]
    fn series_validation() {
        let mut s = series(1.0, 1.0, 1.0);
        s.points.truncate(3);
        assert!(fit_power_quadratic(&s).is_err());
        let mut s = series(1.0, 1.0, 1.0);
        s.points[1].0 = s.points[0].0;
        assert!(fit_power_quadratic(&s).is_err());
    }

    #[test]
    fn pgr_and_brightness() {
        let (r, es, ei) = (1e6, 0.1, 0.12);
        assert_relative_eq!(
            pgr(es * r, ei * r, es * ei * r).unwrap(),
            r,
            max_relative = 1e-14
        );
        assert_eq!(pgr(5.0, 5.0, 5.0).unwrap(), 5.0);
        assert!(matches!(
            pgr(1.0, 1.0, 0.0),
            Err(Error::DivisionUndefined(_))
        ));
        assert_eq!(spectral_brightness(1e6, 100.0).unwrap(), 1e4);
        assert!(spectral_brightness(1e6, 0.0).is_err());
    }

    #[test]
    fn efficiency_budget() {
        let e = efficiencies(1.0, 1.0, 1.0, 1.0, 1.0, 1.0).unwrap();
        assert_eq!(e.eta_s, 1.0);
        let rc = 0.1836 * 0.1836;
        let e = efficiencies(0.1836, 0.1836, rc, 0.5, 0.5, 0.9).unwrap();
        assert_relative_eq!(e.extraction_s, 0.408, max_relative = 1e-12);
        assert!(e.consistent);
        let e = efficiencies(0.1, 0.1, 0.09, 0.5, 0.5, 0.9).unwrap();
        assert!(!e.consistent);
    }

    #[test]
    fn jsi_without_accidentals_is_diagonal() {
        let m = ChannelRateModel {
            m: 1,
            pgr: 1e5,
            eta_s: 0.2,
            eta_i: 0.2,
            raman_s: 0.0,
            raman_i: 0.0,
            dark_s: 0.0,
            dark_i: 0.0,
            tau_w: 1e-9,
        };
        let g = jsi(&[m; 5], 1.0, 0.0, 10.0, 1).unwrap();
        for j in 0..5 {
            for k in 0..5 {
                if j != k {
                    assert_eq!(g.rates[j][k], 0.0);
                } else {
                    assert!(g.rates[j][k] > 0.0);
                }
            }
        }
        assert_eq!(g.dominance(), None);
    }
}
