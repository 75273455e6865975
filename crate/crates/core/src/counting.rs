//! Photon-counting statistics: seeded Poisson draws, two-photon visibility,
//! coincidence-to-accidental ratio and the pair bandwidth extracted from a
//! coincidence-delay histogram.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lsq::{levenberg_marquardt, LmOptions};
use crate::pair_source::{expected_coincidences, expected_singles, Arm, ChannelRateModel};
use crate::rng::{derive_seed, rng_from_seed, SimRng};

/// Draws Poisson counts from a single seeded stream.
pub struct PoissonSampler {
    rng: SimRng,
}

impl PoissonSampler {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: rng_from_seed(seed),
        }
    }

    /// One draw with the given mean. Means of zero return zero.
    pub fn draw(&mut self, mean: f64) -> Result<u64> {
        if !(mean >= 0.0) || !mean.is_finite() {
            return Err(Error::InvalidInput(format!(
                "Poisson mean {mean} must be finite and non-negative"
            )));
        }
        if mean == 0.0 {
            return Ok(0);
        }
        let dist = Poisson::new(mean)
            .map_err(|e| Error::InvalidInput(format!("Poisson mean {mean}: {e}")))?;
        Ok(dist.sample(&mut self.rng) as u64)
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Standard normal draw, for detector and trace noise.
    pub fn gaussian(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }
}

/// One Poisson draw of `rate * integration_time`; deterministic in `seed`.
pub fn sample_counts(expected_rate: f64, integration_time: f64, seed: u64) -> Result<u64> {
    if !(expected_rate >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "rate {expected_rate} is negative"
        )));
    }
    if !(integration_time > 0.0) {
        return Err(Error::InvalidInput(format!(
            "integration time {integration_time} must be positive"
        )));
    }
    PoissonSampler::new(seed).draw(expected_rate * integration_time)
}

/// `((DD + AA) - (DA + AD)) / (DD + AA + DA + AD)`.
pub fn visibility(cc_dd: f64, cc_da: f64, cc_ad: f64, cc_aa: f64) -> Result<f64> {
    let total = cc_dd + cc_da + cc_ad + cc_aa;
    if !(total > 0.0) {
        return Err(Error::UndefinedVisibility);
    }
    Ok(((cc_dd + cc_aa) - (cc_da + cc_ad)) / total)
}

/// Poisson standard deviation of a visibility estimated from `total` counts.
pub fn visibility_sigma(visibility: f64, total: f64) -> f64 {
    ((1.0 - visibility * visibility).max(0.0) / total).sqrt()
}

pub fn car(coincidences: f64, accidentals: f64) -> Result<f64> {
    if !(accidentals > 0.0) {
        return Err(Error::DivisionUndefined("CAR"));
    }
    Ok(coincidences / accidentals)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum CarEstimate {
    Value(f64),
    /// No accidentals were recorded; the value assumes a single one.
    LowerBound(f64),
}

impl CarEstimate {
    pub fn value(&self) -> f64 {
        match *self {
            CarEstimate::Value(v) | CarEstimate::LowerBound(v) => v,
        }
    }
}

pub fn car_estimate(coincidences: f64, accidentals: f64) -> CarEstimate {
    match car(coincidences, accidentals) {
        Ok(v) => CarEstimate::Value(v),
        Err(_) => CarEstimate::LowerBound(coincidences),
    }
}

/// Counts accumulated for one channel pair at one pump power.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountRecord {
    pub singles_s: u64,
    pub singles_i: u64,
    /// Coincidences in the signal window (true pairs plus accidentals).
    pub coincidences: u64,
    /// Coincidences in an equal-width window off the correlation peak.
    pub accidentals: u64,
    pub integration_time: f64,
    pub power: f64,
    pub seed: u64,
}

impl CountRecord {
    pub fn car(&self) -> CarEstimate {
        car_estimate(self.coincidences as f64, self.accidentals as f64)
    }
}

/// Samples a [`CountRecord`] from the rate model. The four counters use
/// independent streams derived from `seed` with labels 0..=3.
pub fn simulate_record(
    model: &ChannelRateModel,
    power: f64,
    integration_time: f64,
    seed: u64,
) -> Result<CountRecord> {
    let ns = expected_singles(model, Arm::Signal, power)?;
    let ni = expected_singles(model, Arm::Idler, power)?;
    let c = expected_coincidences(model, power)?;
    Ok(CountRecord {
        singles_s: sample_counts(ns, integration_time, derive_seed(seed, 0))?,
        singles_i: sample_counts(ni, integration_time, derive_seed(seed, 1))?,
        coincidences: sample_counts(c.total(), integration_time, derive_seed(seed, 2))?,
        accidentals: sample_counts(c.accidental_rate, integration_time, derive_seed(seed, 3))?,
        integration_time,
        power,
        seed,
    })
}

/// Decay time of the two-sided exponential correlation for a pair
/// bandwidth `bandwidth` (Hz): `τ_d = 1 / (2π Δν)`.
pub fn decay_time(bandwidth: f64) -> f64 {
    1.0 / (2.0 * PI * bandwidth)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramSpec {
    /// Pair bandwidth, Hz.
    pub bandwidth: f64,
    /// Expected counts in the bin at the peak (above background).
    pub peak_counts: f64,
    /// Expected flat background per bin.
    pub background: f64,
    /// Bin width, s.
    pub bin_width: f64,
    /// Bins on each side of the central bin.
    pub half_bins: usize,
    /// Delay of the correlation peak, s.
    pub offset: f64,
}

/// Expected counts `A exp(-|τ - τ0|/τ_d) + B` at bin centers.
pub fn histogram_generate(spec: &HistogramSpec) -> Result<Vec<(f64, f64)>> {
    if !(spec.bandwidth > 0.0) || !(spec.bin_width > 0.0) {
        return Err(Error::param(
            "bandwidth",
            "bandwidth and bin width must be positive",
        ));
    }
    let tau_d = decay_time(spec.bandwidth);
    let n = spec.half_bins as i64;
    Ok((-n..=n)
        .map(|k| {
            let t = k as f64 * spec.bin_width;
            (
                t,
                spec.peak_counts * (-(t - spec.offset).abs() / tau_d).exp() + spec.background,
            )
        })
        .collect())
}

/// Poisson-resamples an expected histogram.
pub fn histogram_sample(expected: &[(f64, f64)], seed: u64) -> Result<Vec<(f64, f64)>> {
    let mut sampler = PoissonSampler::new(seed);
    expected
        .iter()
        .map(|&(t, mu)| sampler.draw(mu).map(|c| (t, c as f64)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandwidthFit {
    pub bandwidth: f64,
    pub decay_time: f64,
    pub amplitude: f64,
    pub background: f64,
    pub peak_delay: f64,
}

/// Fits `A exp(-|τ - τ0|/τ_d) + B` to a single-peaked histogram and returns
/// the bandwidth `1 / (2π τ_d)` in Hz.
pub fn histogram_bandwidth(histogram: &[(f64, f64)]) -> Result<f64> {
    fit_histogram(histogram).map(|f| f.bandwidth)
}

pub fn fit_histogram(histogram: &[(f64, f64)]) -> Result<BandwidthFit> {
    let mut pts = histogram.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = pts.len();
    if n < 21 {
        return Err(Error::InvalidInput(format!("histogram has only {n} bins")));
    }
    let (ipk, &(t_pk, c_pk)) = pts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
        .expect("non-empty");
    if ipk < 10 || n - 1 - ipk < 10 {
        return Err(Error::InvalidInput(
            "need at least 10 bins on each side of the peak".into(),
        ));
    }

    let edge = (n / 10).max(3);
    let mut outer: Vec<f64> = pts[..edge]
        .iter()
        .chain(&pts[n - edge..])
        .map(|p| p.1)
        .collect();
    outer.sort_by(f64::total_cmp);
    let background0 = outer[outer.len() / 2];
    let amp0 = c_pk - background0;
    if !(amp0 > 3.0 * background0.max(1.0).sqrt()) {
        return Err(Error::FitFailure(
            "no correlation peak above background".into(),
        ));
    }

    let half = background0 + 0.5 * amp0;
    let mut lo = ipk;
    while lo > 0 && pts[lo].1 > half {
        lo -= 1;
    }
    let mut hi = ipk;
    while hi < n - 1 && pts[hi].1 > half {
        hi += 1;
    }
    let bin = (pts[1].0 - pts[0].0).abs();
    let tau0 = (0.5 * (pts[hi].0 - pts[lo].0) / std::f64::consts::LN_2).max(bin);

    let xs: Vec<f64> = pts.iter().map(|p| (p.0 - t_pk) / tau0).collect();
    let scale = amp0;
    let ys: Vec<f64> = pts.iter().map(|p| p.1 / scale).collect();
    // Poisson weighting with a floor of one count.
    let ws: Vec<f64> = pts.iter().map(|p| scale / p.1.max(1.0).sqrt()).collect();
    let residuals = |p: &[f64]| -> Vec<f64> {
        let td = p[2].abs().max(1e-9);
        xs.iter()
            .zip(&ys)
            .zip(&ws)
            .map(|((x, y), w)| w * (p[0] * (-(x - p[1]).abs() / td).exp() + p[3] - y))
            .collect()
    };
    let rep = levenberg_marquardt(
        residuals,
        &[1.0, 0.0, 1.0, background0 / scale],
        LmOptions::default(),
    )?;
    let decay = rep.params[2].abs() * tau0;
    let amplitude = rep.params[0] * scale;
    if !(decay > 0.0) || !(amplitude > 0.0) || !decay.is_finite() {
        return Err(Error::FitFailure("no exponential decay detected".into()));
    }
    Ok(BandwidthFit {
        bandwidth: 1.0 / (2.0 * PI * decay),
        decay_time: decay,
        amplitude,
        background: rep.params[3] * scale,
        peak_delay: t_pk + rep.params[1] * tau0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn sampling_basics() {
        assert_eq!(sample_counts(0.0, 10.0, 1).unwrap(), 0);
        assert_eq!(
            sample_counts(12.5, 3.0, 99).unwrap(),
            sample_counts(12.5, 3.0, 99).unwrap()
        );
        assert!(matches!(
            sample_counts(-1.0, 1.0, 0),
            Err(Error::InvalidInput(_))
        ));
        assert!(sample_counts(1.0, 0.0, 0).is_err());
    }

    #[test]
    fn poisson_moments() {
        let mut s = PoissonSampler::new(2024);
        let draws: Vec<f64> = (0..10_000).map(|_| s.draw(100.0).unwrap() as f64).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
        // σ of the mean is sqrt(100 / 1e4) = 0.1
        assert!((mean - 100.0).abs() < 0.3, "{mean}");
        let ratio = var / mean;
        assert!((0.9..=1.1).contains(&ratio), "{ratio}");
    }

    #[test]
    fn visibility_cases() {
        assert_eq!(visibility(50.0, 0.0, 0.0, 50.0).unwrap(), 1.0);
        assert_eq!(visibility(7.0, 7.0, 7.0, 7.0).unwrap(), 0.0);
        assert_eq!(visibility(0.0, 3.0, 5.0, 0.0).unwrap(), -1.0);
        assert!(matches!(
            visibility(0.0, 0.0, 0.0, 0.0),
            Err(Error::UndefinedVisibility)
        ));
    }

    #[test]
    fn car_cases() {
        assert_relative_eq!(car(410.0, 10.0).unwrap(), 41.0);
        assert_relative_eq!(car(100.0, 100.0).unwrap(), 1.0);
        assert!(matches!(car(5.0, 0.0), Err(Error::DivisionUndefined(_))));
        assert_eq!(car_estimate(5.0, 0.0), CarEstimate::LowerBound(5.0));
    }

    fn spec(bw: f64) -> HistogramSpec {
        let td = decay_time(bw);
        HistogramSpec {
            bandwidth: bw,
            peak_counts: 5000.0,
            background: 20.0,
            bin_width: td / 8.0,
            half_bins: 120,
            offset: 0.3 * td / 8.0,
        }
    }

    #[test]
    fn bandwidth_round_trip_noiseless() {
        for bw in [50e6, 190.41e6, 1e9] {
            let h = histogram_generate(&spec(bw)).unwrap();
            let got = histogram_bandwidth(&h).unwrap();
            assert_relative_eq!(got, bw, max_relative = 1e-3);
        }
    }

    #[test]
    fn doubling_decay_time_halves_bandwidth() {
        let base = spec(200e6);
        let slow = HistogramSpec {
            bandwidth: 100e6,
            ..base
        };
        let a = histogram_bandwidth(&histogram_generate(&base).unwrap()).unwrap();
        let b = histogram_bandwidth(&histogram_generate(&slow).unwrap()).unwrap();
        assert_relative_eq!(a / b, 2.0, max_relative = 2e-3);
    }

    #[test]
    fn flat_histogram_fails() {
        let h: Vec<(f64, f64)> = (0..60).map(|k| (k as f64, 100.0)).collect();
        assert!(histogram_bandwidth(&h).is_err());
    }
}
