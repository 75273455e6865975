//! Static spectral model of the microring: Lorentzian transmission dips, the
//! signal/idler channel grid, thermo-optic tuning and resonance fitting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lsq::{levenberg_marquardt, LmOptions};

/// One resonance of the ring. `fwhm` overrides [`RingSpec::fwhm`] when set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Resonance {
    pub center: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fwhm: Option<f64>,
}

/// Static cavity description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RingSpec {
    /// Pump laser frequency, Hz.
    pub pump_frequency: f64,
    /// Free spectral range, Hz.
    pub fsr: f64,
    /// Default full width at half maximum of every resonance, Hz.
    pub fwhm: f64,
    /// Transmission at the bottom of a dip.
    pub min_transmission: f64,
    /// Resonance shift per degree of chip temperature change, Hz/°C.
    pub k_temp: f64,
    /// Resonance shift per squared heater current, Hz/mA².
    pub k_current: f64,
    /// Microheater resistance, Ω.
    pub heater_resistance: f64,
    /// Cold-cavity center of the pumped resonance minus the pump frequency,
    /// at zero heater current, Hz.
    pub cold_detuning: f64,
    /// Explicit per-resonance centers. Empty means a uniform FSR comb.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub resonances: Vec<Resonance>,
}

impl Default for RingSpec {
    fn default() -> Self {
        Self {
            pump_frequency: 193.5e12,
            fsr: 99.03e9,
            fwhm: 190.41e6,
            min_transmission: 0.02,
            k_temp: -3.01e9,
            k_current: -0.91e9,
            heater_resistance: 2050.0,
            cold_detuning: 3.0e9,
            resonances: Vec::new(),
        }
    }
}

impl RingSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.fsr > 0.0) {
            return Err(Error::param("fsr", "must be positive"));
        }
        if !(self.fwhm > 0.0) {
            return Err(Error::param("fwhm", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.min_transmission) {
            return Err(Error::param("min_transmission", "must lie in [0, 1)"));
        }
        if !(self.pump_frequency > 0.0) {
            return Err(Error::param("pump_frequency", "must be positive"));
        }
        if !(self.heater_resistance > 0.0) {
            return Err(Error::param("heater_resistance", "must be positive"));
        }
        for r in &self.resonances {
            if let Some(w) = r.fwhm {
                if !(w > 0.0) {
                    return Err(Error::param("resonances.fwhm", "must be positive"));
                }
            }
        }
        Ok(())
    }

    /// Loaded quality factor `f0 / fwhm` of the pumped resonance.
    pub fn q_factor(&self) -> f64 {
        self.pumped_center() / self.fwhm
    }

    /// Cold-cavity center of the pumped resonance at zero heater current.
    pub fn pumped_center(&self) -> f64 {
        self.pump_frequency + self.cold_detuning
    }

    /// Resonances used for spectrum simulation: the explicit list when
    /// given, otherwise `count` lines on a uniform FSR grid starting
    /// `below` lines under the pumped resonance.
    pub fn resonance_lines(&self, below: usize, count: usize) -> Vec<Resonance> {
        if !self.resonances.is_empty() {
            return self.resonances.clone();
        }
        (0..count)
            .map(|k| Resonance {
                center: self.pumped_center() + (k as f64 - below as f64) * self.fsr,
                fwhm: None,
            })
            .collect()
    }

    /// Electrical power dissipated in the heater at `current` mA, in mW.
    pub fn heater_power(&self, current: f64) -> f64 {
        // mA² · Ω = µW
        current * current * self.heater_resistance * 1e-3
    }
}

/// Lorentzian dip with floor `min_transmission`:
/// `T(d) = 1 - (1 - Tmin) (w/2)² / (d² + (w/2)²)`.
pub fn transmission(detuning: f64, fwhm: f64, min_transmission: f64) -> Result<f64> {
    if !(fwhm > 0.0) {
        return Err(Error::param("fwhm", format!("{fwhm} is not positive")));
    }
    if !(0.0..1.0).contains(&min_transmission) {
        return Err(Error::param(
            "min_transmission",
            format!("{min_transmission} outside [0, 1)"),
        ));
    }
    Ok(dip(detuning, fwhm, min_transmission))
}

#[inline]
pub(crate) fn dip(detuning: f64, fwhm: f64, min_transmission: f64) -> f64 {
    let hw2 = 0.25 * fwhm * fwhm;
    1.0 - (1.0 - min_transmission) * hw2 / (detuning * detuning + hw2)
}

/// A signal/idler channel pair symmetric about the pump.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelPair {
    pub index: u32,
    pub signal_frequency: f64,
    pub idler_frequency: f64,
}

impl ChannelPair {
    pub fn new(pump_frequency: f64, grid_spacing: f64, index: u32) -> Self {
        let offset = index as f64 * grid_spacing;
        Self {
            index,
            signal_frequency: pump_frequency + offset,
            idler_frequency: pump_frequency - offset,
        }
    }

    /// Signal detuning from the pump.
    pub fn detuning(&self, pump_frequency: f64) -> f64 {
        self.signal_frequency - pump_frequency
    }
}

/// Pairs `m = 1..=pair_count`; signal above the pump, idler below.
pub fn comb_grid(
    pump_frequency: f64,
    grid_spacing: f64,
    pair_count: u32,
) -> Result<Vec<ChannelPair>> {
    if !(grid_spacing > 0.0) {
        return Err(Error::param("grid_spacing", "must be positive"));
    }
    Ok((1..=pair_count)
        .map(|m| ChannelPair::new(pump_frequency, grid_spacing, m))
        .collect())
}

/// Resonance shift from chip temperature change (°C) and heater current (mA).
pub fn thermal_shift(delta_temp: f64, heater_current: f64, spec: &RingSpec) -> f64 {
    spec.k_temp * delta_temp + spec.k_current * heater_current * heater_current
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LorentzianFit {
    pub f0: f64,
    pub fwhm: f64,
    pub min_transmission: f64,
    pub q: f64,
}

/// Samples the dip at the given frequencies.
pub fn sample_dip(
    f0: f64,
    fwhm: f64,
    min_transmission: f64,
    freqs: &[f64],
) -> Result<Vec<(f64, f64)>> {
    freqs
        .iter()
        .map(|&f| transmission(f - f0, fwhm, min_transmission).map(|t| (f, t)))
        .collect()
}

/// Least-squares fit of the Lorentzian dip to `(frequency, transmission)`
/// samples. Initialization: center at the minimum sample, width from the
/// half-depth crossings, floor from the minimum; then damped Gauss-Newton.
pub fn fit_lorentzian(samples: &[(f64, f64)]) -> Result<LorentzianFit> {
    if samples.len() < 5 {
        return Err(Error::InvalidInput(format!(
            "need at least 5 samples, got {}",
            samples.len()
        )));
    }
    let mut pts = samples.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    if pts.iter().any(|(f, t)| !f.is_finite() || !t.is_finite()) {
        return Err(Error::InvalidInput("non-finite sample".into()));
    }

    let (imin, &(f_min, t_min)) = pts
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
        .expect("non-empty");

    let mut diffs: Vec<f64> = pts.windows(2).map(|w| (w[1].1 - w[0].1).abs()).collect();
    diffs.sort_by(f64::total_cmp);
    let noise = diffs[diffs.len() / 2] / 0.954;
    let mut levels: Vec<f64> = pts.iter().map(|p| p.1).collect();
    levels.sort_by(f64::total_cmp);
    let depth = levels[levels.len() / 2] - t_min;
    if depth <= 5.0 * noise || depth < 1e-9 {
        return Err(Error::FitFailure(format!(
            "no dip above noise (depth {depth:.3e}, noise {noise:.3e})"
        )));
    }

    let half = t_min + 0.5 * depth;
    let crossing = |range: &mut dyn Iterator<Item = usize>| -> Option<f64> {
        let mut prev = imin;
        for i in range {
            if pts[i].1 >= half {
                let (fa, ta) = pts[prev];
                let (fb, tb) = pts[i];
                let frac = if (tb - ta).abs() > 0.0 {
                    (half - ta) / (tb - ta)
                } else {
                    0.5
                };
                return Some(fa + frac * (fb - fa));
            }
            prev = i;
        }
        None
    };
    let left = crossing(&mut (0..imin).rev());
    let right = crossing(&mut (imin + 1..pts.len()));
    let span = pts[pts.len() - 1].0 - pts[0].0;
    let width0 = match (left, right) {
        (Some(l), Some(r)) => r - l,
        (Some(l), None) => 2.0 * (f_min - l),
        (None, Some(r)) => 2.0 * (r - f_min),
        (None, None) => span / 4.0,
    }
    .max(span * 1e-6);

    let xs: Vec<f64> = pts.iter().map(|(f, _)| (f - f_min) / width0).collect();
    let ys: Vec<f64> = pts.iter().map(|(_, t)| *t).collect();
    let residuals = |p: &[f64]| -> Vec<f64> {
        let w = p[1].abs().max(1e-12);
        xs.iter()
            .zip(&ys)
            .map(|(x, y)| dip(x - p[0], w, p[2]) - y)
            .collect()
    };
    let rep = levenberg_marquardt(
        residuals,
        &[0.0, 1.0, t_min.clamp(0.0, 0.999)],
        LmOptions::default(),
    )?;
    let f0 = f_min + rep.params[0] * width0;
    let fwhm = rep.params[1].abs() * width0;
    let min_transmission = rep.params[2];
    if !(fwhm > 0.0) || !f0.is_finite() {
        return Err(Error::FitFailure("degenerate width".into()));
    }
    Ok(LorentzianFit {
        f0,
        fwhm,
        min_transmission,
        q: f0 / fwhm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn transmission_anchor_points() {
        let w = 190.41e6;
        assert_relative_eq!(transmission(0.0, w, 0.05).unwrap(), 0.05, epsilon = 1e-15);
        assert_relative_eq!(
            transmission(w / 2.0, w, 0.05).unwrap(),
            0.525,
            epsilon = 1e-15
        );
        let far = transmission(1e6 * w, w, 0.05).unwrap();
        assert!(far < 1.0 && far > 1.0 - 1e-12);
        assert!(matches!(
            transmission(0.0, 0.0, 0.1),
            Err(Error::InvalidParameter { .. })
        ));
        assert!(transmission(0.0, -1.0, 0.1).is_err());
        assert!(transmission(0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn grid_matches_reported_channel_frequencies() {
        let grid = comb_grid(193.5e12, 99e9, 22).unwrap();
        assert_eq!(grid.len(), 22);
        let p8 = grid[7];
        assert_eq!(p8.index, 8);
        assert!((p8.signal_frequency - 194.292e12).abs() < 1.0);
        assert!((p8.idler_frequency - 192.708e12).abs() < 1.0);
        let p4 = grid[3];
        assert!((p4.signal_frequency - 193.896e12).abs() < 1.0);
        assert!((p4.idler_frequency - 193.104e12).abs() < 1.0);
        for p in &grid {
            assert!((p.signal_frequency + p.idler_frequency - 2.0 * 193.5e12).abs() < 1.0);
        }
    }

    #[test]
    fn grid_edge_cases() {
        assert!(comb_grid(193.5e12, 99e9, 0).unwrap().is_empty());
        let one = comb_grid(193.5e12, 99e9, 1).unwrap();
        assert_eq!(one.len(), 1);
        assert!((one[0].signal_frequency - one[0].idler_frequency - 2.0 * 99e9).abs() < 1.0);
        assert!(comb_grid(193.5e12, 0.0, 3).is_err());
    }

    #[test]
    fn tuning_coefficients() {
        let spec = RingSpec::default();
        assert_relative_eq!(thermal_shift(1.0, 0.0, &spec), -3.01e9);
        assert_relative_eq!(thermal_shift(0.0, 1.0, &spec), -0.91e9);
        assert_eq!(thermal_shift(0.0, 0.0, &spec), 0.0);
        // -0.91 GHz/mA² through a 2050 Ω heater is about -0.44 GHz/mW
        let per_mw = thermal_shift(0.0, 1.0, &spec) / spec.heater_power(1.0);
        assert!((per_mw + 0.44e9).abs() < 0.01e9, "{per_mw}");
    }

    #[test]
    fn noiseless_fit_is_exact() {
        let (f0, w, tmin) = (193.5e12, 190.41e6, 0.05);
        let freqs: Vec<f64> = (0..201)
            .map(|i| f0 + (i as f64 - 100.0) * 0.05 * w + 0.013 * w)
            .collect();
        let fit = fit_lorentzian(&sample_dip(f0, w, tmin, &freqs).unwrap()).unwrap();
        assert_relative_eq!(fit.f0, f0, max_relative = 1e-6);
        assert_relative_eq!(fit.fwhm, w, max_relative = 1e-6);
        assert!((fit.min_transmission - tmin).abs() < 1e-6);
        // Q = f0 / fwhm
        assert!((fit.q - 1.0162e6).abs() < 1e3, "{}", fit.q);
    }

    #[test]
    fn flat_trace_is_a_fit_failure() {
        use rand::Rng;
        let mut rng = crate::rng::rng_from_seed(4);
        let pts: Vec<(f64, f64)> = (0..50)
            .map(|i| (i as f64, 1.0 - 1e-4 * rng.random::<f64>()))
            .collect();
        assert!(matches!(fit_lorentzian(&pts), Err(Error::FitFailure(_))));
        assert!(fit_lorentzian(&pts[..3]).is_err());
    }
}
