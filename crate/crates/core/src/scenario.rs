//! Seeded end-to-end scenarios.
//!
//! A [`Scenario`] is a single JSON document describing the device, the
//! source and every measurement stage. [`run_scenario`] executes the
//! requested stages and returns typed results; the [`report`](crate::report)
//! module turns them into files. Each stage draws from its own stream
//! derived from the root seed, so stages can be run alone or together with
//! identical results.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cavity::{comb_grid, fit_lorentzian, sample_dip, ChannelPair, RingSpec};
use crate::counting::{
    car, fit_histogram, histogram_generate, histogram_sample, simulate_record, visibility,
    visibility_sigma, HistogramSpec, PoissonSampler,
};
use crate::error::{Error, FieldIssue, Result};
use crate::jones::{
    compensation_angle, compensator, compensator_phase, sagnac_state, setting_probabilities, Basis,
    JonesVector, MeasurementSetting, Polarization,
};
use crate::pair_source::{
    expected_coincidences, expected_singles, werner_fidelity, Arm, ChannelRateModel, EnvelopeSpec,
};
use crate::rng::{derive_path, derive_seed};
use crate::spectral::{
    classify_resonant, efficiencies, fit_power_quadratic, jsi, pgr, spectral_brightness,
    ChannelFit, ClassifyConfig, Efficiencies, JsiGrid, PowerFit, PowerSeries,
};
use crate::state::{TwoQubitState, C64};
use crate::thermal::{
    hysteresis_area, run_lock, static_trace, sweep_trace, ControllerConfig, Drift, LockRun,
    LockSample, SweepDirection, ThermalModel, TracePoint,
};
use crate::tomography::{
    fidelity, mle_from_counts, simulate_tomography, MleOptions, TomographyTable,
};

pub const SCHEMA_VERSION: u32 = 1;

/// The bundled default scenario, as shipped in `scenarios/paper-defaults.json`.
pub const PAPER_DEFAULTS_JSON: &str = include_str!("../scenarios/paper-defaults.json");

/// Source parameters shared by every channel; the pair rate of channel `m`
/// is `peak_pgr` scaled by the generation envelope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceTemplate {
    pub peak_pgr: f64,
    pub eta_s: f64,
    pub eta_i: f64,
    pub raman_s: f64,
    pub raman_i: f64,
    pub dark_s: f64,
    pub dark_i: f64,
    pub tau_w: f64,
}

impl SourceTemplate {
    pub fn channel(&self, m: u32, spacing: f64, envelope: &EnvelopeSpec) -> ChannelRateModel {
        ChannelRateModel {
            m,
            pgr: self.peak_pgr * envelope.at_detuning(m as f64 * spacing),
            eta_s: self.eta_s,
            eta_i: self.eta_i,
            raman_s: self.raman_s,
            raman_i: self.raman_i,
            dark_s: self.dark_s,
            dark_i: self.dark_i,
            tau_w: self.tau_w,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumStage {
    /// Lines simulated below the pumped resonance.
    pub lines_below: usize,
    pub line_count: usize,
    /// Sweep span around each line in units of its FWHM.
    pub span_fwhm: f64,
    pub points: usize,
    /// Standard deviation of additive transmission noise.
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HysteresisStage {
    pub powers: Vec<f64>,
    pub current_start: f64,
    pub current_stop: f64,
    pub current_step: f64,
    /// Time at each ramp point, s.
    pub dwell: f64,
}

impl HysteresisStage {
    pub fn ramp(&self) -> Vec<f64> {
        let n = ((self.current_stop - self.current_start) / self.current_step).round() as usize;
        (0..=n)
            .map(|k| self.current_start + k as f64 * self.current_step)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LockStage {
    pub pump_power: f64,
    pub duration: f64,
    pub drift: Drift,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TomographyStage {
    pub pump_power: f64,
    /// Integration time per setting, s.
    pub integration_time: f64,
    /// Phase acquired between the two Sagnac paths before compensation, rad.
    pub loop_phase: f64,
    /// Target phase of the reference Bell state.
    pub target_phase: f64,
    /// Channel whose density matrix is reported.
    pub density_channel: u32,
    pub sweep_channel: u32,
    pub sweep_powers: Vec<f64>,
    pub sweep_integration_time: f64,
    pub visibility_points: usize,
    /// Expected coincidences per visibility point.
    pub visibility_coincidences: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerFitStage {
    pub powers: Vec<f64>,
    pub integration_time: f64,
    /// Filter scan in steps of `scan_step` around the pump, excluding 0.
    pub scan_first: i32,
    pub scan_last: i32,
    pub scan_step: f64,
    /// Raman coefficient off resonance below / above the pump, s⁻¹ mW⁻¹.
    pub off_raman_low: f64,
    pub off_raman_high: f64,
    pub classify: ClassifyConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JsiStage {
    pub pump_power: f64,
    pub integration_time: f64,
    pub car_channel: u32,
    pub car_powers: Vec<f64>,
    pub car_integration_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsStage {
    pub bandwidth_mhz: f64,
    pub histogram_peak_counts: f64,
    pub histogram_background: f64,
    pub histogram_bin_width: f64,
    pub histogram_half_bins: usize,
    pub powers: Vec<f64>,
    pub integration_time: f64,
    pub transmission_s: f64,
    pub transmission_i: f64,
    pub detection: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    pub name: String,
    pub root_seed: u64,
    /// Default output directory.
    pub outputs: String,
    pub ring: RingSpec,
    pub thermal: ThermalModel,
    pub envelope: EnvelopeSpec,
    /// Channel grid spacing, Hz.
    pub channel_spacing: f64,
    pub source: SourceTemplate,
    pub channels: Vec<ChannelRateModel>,
    pub controller: ControllerConfig,
    pub spectrum: SpectrumStage,
    pub hysteresis: HysteresisStage,
    pub lock: LockStage,
    pub tomography: TomographyStage,
    pub power_fit: PowerFitStage,
    pub jsi: JsiStage,
    pub metrics: MetricsStage,
}

/// The calibrated default scenario.
pub fn paper_defaults() -> Scenario {
    let ring = RingSpec::default();
    let envelope = EnvelopeSpec::default();
    let spacing = 99e9;
    let eta = 0.408 * 0.5 * 0.9;
    // channel 4 carries a detected quadratic singles term of 3.90e3
    let peak_pgr = 3.90e3 / (eta * envelope.at_detuning(4.0 * spacing));
    let mean_raman = 1.01e4;
    let (low, high) = (1.32e3, 1.14e3);
    let source = SourceTemplate {
        peak_pgr,
        eta_s: eta,
        eta_i: eta,
        // the idler sits on the Stokes side
        raman_s: 2.0 * mean_raman * high / (low + high),
        raman_i: 2.0 * mean_raman * low / (low + high),
        dark_s: 500.0,
        dark_i: 500.0,
        tau_w: 5e-8,
    };
    let channels = (1..=22)
        .map(|m| source.channel(m, spacing, &envelope))
        .collect();
    Scenario {
        schema_version: SCHEMA_VERSION,
        name: "paper-defaults".into(),
        root_seed: 20230601,
        outputs: "out".into(),
        ring,
        thermal: ThermalModel::default(),
        envelope,
        channel_spacing: spacing,
        source,
        channels,
        controller: ControllerConfig::default(),
        spectrum: SpectrumStage {
            lines_below: 5,
            line_count: 11,
            span_fwhm: 10.0,
            points: 201,
            noise: 0.005,
        },
        hysteresis: HysteresisStage {
            powers: vec![0.015, 0.5, 1.0, 2.0, 2.773],
            current_start: 0.0,
            current_stop: 3.0,
            current_step: 0.002,
            dwell: 20e-3,
        },
        lock: LockStage {
            pump_power: 2.773,
            duration: 100.0,
            drift: Drift::Sinusoid {
                amplitude: 0.5e9,
                period: 60.0,
            },
        },
        tomography: TomographyStage {
            pump_power: 1.0,
            integration_time: 300.0,
            loop_phase: 1.234,
            target_phase: 0.0,
            density_channel: 8,
            sweep_channel: 8,
            sweep_powers: vec![1.0, 2.0, 3.0, 4.0, 6.0],
            sweep_integration_time: 1000.0,
            visibility_points: 25,
            visibility_coincidences: 1e5,
        },
        power_fit: PowerFitStage {
            powers: (1..=10).map(|k| 0.2 * k as f64).collect(),
            integration_time: 10.0,
            scan_first: -67,
            scan_last: 83,
            scan_step: 33e9,
            off_raman_low: low,
            off_raman_high: high,
            classify: ClassifyConfig::default(),
        },
        jsi: JsiStage {
            pump_power: 0.5,
            integration_time: 100.0,
            car_channel: 4,
            car_powers: vec![
                0.05, 0.1, 0.15, 0.2, 0.3, 0.4, 0.5, 0.7, 1.0, 1.5, 2.0, 2.5, 3.0,
            ],
            car_integration_time: 1000.0,
        },
        metrics: MetricsStage {
            bandwidth_mhz: 184.58,
            histogram_peak_counts: 1e4,
            histogram_background: 50.0,
            histogram_bin_width: 20e-12,
            histogram_half_bins: 200,
            powers: (1..=10).map(|k| 0.2 * k as f64).collect(),
            integration_time: 100.0,
            transmission_s: 0.5,
            transmission_i: 0.5,
            detection: 0.9,
        },
    }
}

struct Issues(Vec<FieldIssue>);

impl Issues {
    fn check(&mut self, ok: bool, field: impl Into<String>, message: impl Into<String>) {
        if !ok {
            self.0.push(FieldIssue {
                field: field.into(),
                message: message.into(),
            });
        }
    }

    fn absorb(&mut self, field: &str, r: Result<()>) {
        if let Err(e) = r {
            let (field, message) = match e {
                Error::InvalidParameter { name, reason } => (format!("{field}.{name}"), reason),
                other => (field.to_string(), other.to_string()),
            };
            self.0.push(FieldIssue { field, message });
        }
    }

    fn positive(&mut self, v: f64, field: &str) {
        self.check(
            v > 0.0 && v.is_finite(),
            field,
            format!("must be positive, got {v}"),
        );
    }

    fn powers(&mut self, v: &[f64], field: &str) {
        self.check(!v.is_empty(), field, "must not be empty");
        for (k, p) in v.iter().enumerate() {
            self.check(
                *p > 0.0 && p.is_finite(),
                format!("{field}[{k}]"),
                format!("power {p} must be positive"),
            );
        }
    }
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        let s: Scenario = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes") + "\n"
    }

    /// SHA-256 of the compact JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("scenario serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Collects every field-level problem.
    pub fn validate(&self) -> Result<()> {
        let mut is = Issues(Vec::new());
        is.check(
            self.schema_version == SCHEMA_VERSION,
            "schema_version",
            format!(
                "unsupported version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            ),
        );
        is.absorb("ring", self.ring.validate());
        is.absorb("thermal", self.thermal.validate());
        is.absorb("envelope", self.envelope.validate());
        is.positive(self.channel_spacing, "channel_spacing");
        let template = ChannelRateModel {
            m: 0,
            pgr: self.source.peak_pgr,
            eta_s: self.source.eta_s,
            eta_i: self.source.eta_i,
            raman_s: self.source.raman_s,
            raman_i: self.source.raman_i,
            dark_s: self.source.dark_s,
            dark_i: self.source.dark_i,
            tau_w: self.source.tau_w,
        };
        is.absorb("source", template.validate());
        is.check(
            !self.channels.is_empty(),
            "channels",
            "at least one channel pair is required",
        );
        for (k, ch) in self.channels.iter().enumerate() {
            is.absorb(&format!("channels[{k}]"), ch.validate());
            is.check(
                ch.m >= 1,
                format!("channels[{k}].m"),
                "channel index starts at 1",
            );
        }
        let mut ms: Vec<u32> = self.channels.iter().map(|c| c.m).collect();
        ms.sort_unstable();
        is.check(
            ms.windows(2).all(|w| w[0] != w[1]),
            "channels",
            "channel indices must be unique",
        );
        is.absorb("controller", self.controller.validate());

        let sp = &self.spectrum;
        is.check(
            sp.line_count >= 1,
            "spectrum.line_count",
            "must be at least 1",
        );
        is.check(
            sp.points >= 5,
            "spectrum.points",
            "need at least 5 points per line",
        );
        is.positive(sp.span_fwhm, "spectrum.span_fwhm");
        is.check(sp.noise >= 0.0, "spectrum.noise", "must be non-negative");

        let h = &self.hysteresis;
        is.powers(&h.powers, "hysteresis.powers");
        is.positive(h.current_step, "hysteresis.current_step");
        is.positive(h.dwell, "hysteresis.dwell");
        is.check(
            h.current_start >= 0.0 && h.current_stop > h.current_start,
            "hysteresis.current_stop",
            "ramp must run upward from a non-negative start",
        );

        is.positive(self.lock.pump_power, "lock.pump_power");
        is.positive(self.lock.duration, "lock.duration");
        if let Drift::Sinusoid { period, .. } = self.lock.drift {
            is.positive(period, "lock.drift.period");
        }

        let t = &self.tomography;
        is.positive(t.pump_power, "tomography.pump_power");
        is.positive(t.integration_time, "tomography.integration_time");
        is.positive(
            t.sweep_integration_time,
            "tomography.sweep_integration_time",
        );
        is.powers(&t.sweep_powers, "tomography.sweep_powers");
        is.check(
            self.channel(t.density_channel).is_some(),
            "tomography.density_channel",
            "no such channel",
        );
        is.check(
            self.channel(t.sweep_channel).is_some(),
            "tomography.sweep_channel",
            "no such channel",
        );
        is.check(
            t.visibility_points >= 2,
            "tomography.visibility_points",
            "need at least 2 points",
        );
        is.positive(
            t.visibility_coincidences,
            "tomography.visibility_coincidences",
        );

        let pf = &self.power_fit;
        is.powers(&pf.powers, "power_fit.powers");
        is.check(
            pf.powers.len() >= 4,
            "power_fit.powers",
            "a three-term fit needs at least 4 powers",
        );
        is.positive(pf.integration_time, "power_fit.integration_time");
        is.positive(pf.scan_step, "power_fit.scan_step");
        is.check(
            pf.scan_first < pf.scan_last,
            "power_fit.scan_last",
            "scan must be increasing",
        );
        is.check(
            pf.off_raman_low >= 0.0,
            "power_fit.off_raman_low",
            "must be non-negative",
        );
        is.check(
            pf.off_raman_high >= 0.0,
            "power_fit.off_raman_high",
            "must be non-negative",
        );

        let j = &self.jsi;
        is.positive(j.pump_power, "jsi.pump_power");
        is.positive(j.integration_time, "jsi.integration_time");
        is.positive(j.car_integration_time, "jsi.car_integration_time");
        is.powers(&j.car_powers, "jsi.car_powers");
        is.check(
            self.channel(j.car_channel).is_some(),
            "jsi.car_channel",
            "no such channel",
        );

        let me = &self.metrics;
        is.positive(me.bandwidth_mhz, "metrics.bandwidth_mhz");
        is.positive(me.histogram_peak_counts, "metrics.histogram_peak_counts");
        is.check(
            me.histogram_background >= 0.0,
            "metrics.histogram_background",
            "must be non-negative",
        );
        is.positive(me.histogram_bin_width, "metrics.histogram_bin_width");
        is.check(
            me.histogram_half_bins >= 10,
            "metrics.histogram_half_bins",
            "need at least 10",
        );
        is.powers(&me.powers, "metrics.powers");
        is.check(
            me.powers.len() >= 4,
            "metrics.powers",
            "a three-term fit needs at least 4 powers",
        );
        is.positive(me.integration_time, "metrics.integration_time");
        for (name, v) in [
            ("metrics.transmission_s", me.transmission_s),
            ("metrics.transmission_i", me.transmission_i),
            ("metrics.detection", me.detection),
        ] {
            is.check(v > 0.0 && v <= 1.0, name, format!("{v} outside (0, 1]"));
        }

        if is.0.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(is.0))
        }
    }

    pub fn channel(&self, m: u32) -> Option<&ChannelRateModel> {
        self.channels.iter().find(|c| c.m == m)
    }

    fn channel_or_err(&self, m: u32) -> Result<&ChannelRateModel> {
        self.channel(m)
            .ok_or_else(|| Error::InvalidInput(format!("channel {m} is not configured")))
    }

    pub fn channel_pair(&self, m: u32) -> ChannelPair {
        ChannelPair::new(self.ring.pump_frequency, self.channel_spacing, m)
    }
}

/// Pipeline stages, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Spectrum,
    Hysteresis,
    Lock,
    Tomo,
    PowerFit,
    Jsi,
    Metrics,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Spectrum,
        Stage::Hysteresis,
        Stage::Lock,
        Stage::Tomo,
        Stage::PowerFit,
        Stage::Jsi,
        Stage::Metrics,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Spectrum => "spectrum",
            Stage::Hysteresis => "hysteresis",
            Stage::Lock => "lock",
            Stage::Tomo => "tomo",
            Stage::PowerFit => "power-fit",
            Stage::Jsi => "jsi",
            Stage::Metrics => "metrics",
        }
    }

    /// Label for deriving the stage's random stream from the root seed.
    fn seed_label(self) -> u64 {
        self as u64 + 1
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::UnknownLabel(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResonanceRow {
    pub line: i64,
    pub true_center: f64,
    pub fitted_center: f64,
    pub fwhm: f64,
    pub q: f64,
    pub min_transmission: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HysteresisRun {
    pub power: f64,
    pub forward: Vec<TracePoint>,
    /// Ordered as swept (decreasing current).
    pub backward: Vec<TracePoint>,
    pub static_trace: Vec<TracePoint>,
    pub max_gap: f64,
    pub area: f64,
    /// Largest deviation of either sweep from the cold-cavity lineshape.
    pub max_static_deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LockResult {
    pub closed: Vec<LockSample>,
    pub open: Vec<LockSample>,
    pub setpoint: f64,
    pub max_closed_deviation: f64,
    pub max_open_transmission: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisibilityPoint {
    pub theta: f64,
    pub hwp_angle: f64,
    pub counts: [u64; 4],
    pub visibility: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelFidelity {
    pub m: u32,
    pub signal_frequency: f64,
    pub idler_frequency: f64,
    pub raw: f64,
    pub net: f64,
    /// Fidelity of the noise model `p ρ + (1-p) I/4` with `p` the true
    /// coincidence fraction.
    pub model: f64,
    pub true_rate: f64,
    pub accidental_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerFidelity {
    pub power: f64,
    pub raw: f64,
    pub net: f64,
    pub model: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TomoResult {
    pub visibility: Vec<VisibilityPoint>,
    pub compensator_angle: f64,
    pub channels: Vec<ChannelFidelity>,
    pub tables: Vec<(u32, TomographyTable)>,
    pub density_channel: u32,
    pub density: TwoQubitState,
    pub sweep_channel: u32,
    pub vs_power: Vec<PowerFidelity>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanLine {
    pub offset_index: i32,
    pub frequency: f64,
    /// Whether the line sits on a pair resonance (ground truth).
    pub on_grid: bool,
    pub fit: PowerFit,
    pub resonant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerFitResult {
    pub lines: Vec<ScanLine>,
    pub reference_b: f64,
    pub mean_b_on: f64,
    pub mean_b_off: f64,
    pub mean_b_off_low: f64,
    pub mean_b_off_high: f64,
    pub misclassified: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CarPoint {
    pub power: f64,
    pub coincidences: u64,
    pub accidentals: u64,
    pub car: f64,
    /// Expected `(true + accidental) / accidental`.
    pub model: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsiResult {
    pub grid: JsiGrid,
    pub cross_accidental_rate: f64,
    pub dominance: Option<f64>,
    pub car_channel: u32,
    pub car: Vec<CarPoint>,
    /// Power of the largest measured CAR.
    pub car_peak_power: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelMetrics {
    pub m: u32,
    pub bandwidth_mhz: f64,
    pub rs: f64,
    pub ri: f64,
    pub rc: f64,
    pub pgr: f64,
    pub true_pgr: f64,
    pub brightness: f64,
    pub efficiencies: Efficiencies,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsResult {
    pub channels: Vec<ChannelMetrics>,
    pub mean_bandwidth_mhz: f64,
    pub mean_extraction: f64,
}

/// Results of a scenario run; stages that were not requested are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResults {
    pub scenario_hash: String,
    pub root_seed: u64,
    pub spectrum: Option<Vec<ResonanceRow>>,
    pub hysteresis: Option<Vec<HysteresisRun>>,
    pub lock: Option<LockResult>,
    pub tomo: Option<TomoResult>,
    pub power_fit: Option<PowerFitResult>,
    pub jsi: Option<JsiResult>,
    pub metrics: Option<MetricsResult>,
}

/// Runs `stages` (all when empty) in pipeline order.
pub fn run_scenario(scenario: &Scenario, stages: &[Stage]) -> Result<RunResults> {
    scenario.validate()?;
    let mut wanted: Vec<Stage> = if stages.is_empty() {
        Stage::ALL.to_vec()
    } else {
        stages.to_vec()
    };
    wanted.sort();
    wanted.dedup();
    let mut out = RunResults {
        scenario_hash: scenario.hash(),
        root_seed: scenario.root_seed,
        spectrum: None,
        hysteresis: None,
        lock: None,
        tomo: None,
        power_fit: None,
        jsi: None,
        metrics: None,
    };
    for stage in wanted {
        let seed = derive_seed(scenario.root_seed, stage.seed_label());
        log::info!("running stage {stage}");
        let wrap = |e: Error| Error::Stage {
            stage: stage.name(),
            source: Box::new(e),
        };
        match stage {
            Stage::Spectrum => out.spectrum = Some(run_spectrum(scenario, seed).map_err(wrap)?),
            Stage::Hysteresis => out.hysteresis = Some(run_hysteresis(scenario).map_err(wrap)?),
            Stage::Lock => out.lock = Some(run_lock_stage(scenario, seed).map_err(wrap)?),
            Stage::Tomo => out.tomo = Some(run_tomo(scenario, seed).map_err(wrap)?),
            Stage::PowerFit => out.power_fit = Some(run_power_fit(scenario, seed).map_err(wrap)?),
            Stage::Jsi => out.jsi = Some(run_jsi(scenario, seed).map_err(wrap)?),
            Stage::Metrics => out.metrics = Some(run_metrics(scenario, seed).map_err(wrap)?),
        }
    }
    Ok(out)
}

fn run_spectrum(sc: &Scenario, seed: u64) -> Result<Vec<ResonanceRow>> {
    let sp = &sc.spectrum;
    let lines = sc.ring.resonance_lines(sp.lines_below, sp.line_count);
    let mut rows = Vec::with_capacity(lines.len());
    for (k, line) in lines.iter().enumerate() {
        let w = line.fwhm.unwrap_or(sc.ring.fwhm);
        let n = sp.points;
        let freqs: Vec<f64> = (0..n)
            .map(|i| line.center + (i as f64 / (n - 1) as f64 - 0.5) * sp.span_fwhm * w)
            .collect();
        let mut noise = PoissonSampler::new(derive_seed(seed, k as u64));
        let samples: Vec<(f64, f64)> =
            sample_dip(line.center, w, sc.ring.min_transmission, &freqs)?
                .into_iter()
                .map(|(f, t)| (f, t + sp.noise * noise.gaussian()))
                .collect();
        let fit = fit_lorentzian(&samples)?;
        rows.push(ResonanceRow {
            line: k as i64 - sp.lines_below as i64,
            true_center: line.center,
            fitted_center: fit.f0,
            fwhm: fit.fwhm,
            q: fit.q,
            min_transmission: fit.min_transmission,
        });
    }
    Ok(rows)
}

fn run_hysteresis(sc: &Scenario) -> Result<Vec<HysteresisRun>> {
    let h = &sc.hysteresis;
    let ramp = h.ramp();
    let mut back = ramp.clone();
    back.reverse();
    let stat = static_trace(&sc.ring, &ramp);
    h.powers
        .iter()
        .map(|&p| {
            let forward = sweep_trace(
                &sc.ring,
                &sc.thermal,
                p,
                &ramp,
                SweepDirection::Forward,
                h.dwell,
            )?;
            let backward = sweep_trace(
                &sc.ring,
                &sc.thermal,
                p,
                &back,
                SweepDirection::Backward,
                h.dwell,
            )?;
            let mut back_sorted = backward.clone();
            back_sorted.reverse();
            let max_gap = forward
                .iter()
                .zip(&back_sorted)
                .map(|(f, b)| (f.transmission - b.transmission).abs())
                .fold(0.0, f64::max);
            let max_static_deviation = forward
                .iter()
                .zip(&stat)
                .chain(back_sorted.iter().zip(&stat))
                .map(|(a, s)| (a.transmission - s.transmission).abs())
                .fold(0.0, f64::max);
            Ok(HysteresisRun {
                power: p,
                area: hysteresis_area(&forward, &backward),
                forward,
                backward,
                static_trace: stat.clone(),
                max_gap,
                max_static_deviation,
            })
        })
        .collect()
}

fn run_lock_stage(sc: &Scenario, seed: u64) -> Result<LockResult> {
    let l = &sc.lock;
    let drift = |t: f64| l.drift.at(t);
    let mut runs = [true, false].map(|enabled| {
        run_lock(
            &sc.ring,
            &sc.thermal,
            &sc.controller,
            &LockRun {
                pump_power: l.pump_power,
                duration: l.duration,
                enabled,
            },
            drift,
            seed,
        )
    });
    let open = std::mem::replace(&mut runs[1], Ok(Vec::new()))?;
    let closed = std::mem::replace(&mut runs[0], Ok(Vec::new()))?;
    let setpoint = sc.controller.setpoint_transmission;
    Ok(LockResult {
        max_closed_deviation: closed
            .iter()
            .map(|s| (s.transmission - setpoint).abs())
            .fold(0.0, f64::max),
        max_open_transmission: open.iter().map(|s| s.transmission).fold(0.0, f64::max),
        closed,
        open,
        setpoint,
    })
}

/// State delivered to the analyzers: Sagnac output with a diagonal pump,
/// followed by the QWP-HWP-QWP compensator on the signal photon.
pub fn prepared_state(loop_phase: f64, hwp_angle: f64) -> Result<TwoQubitState> {
    let pump: JonesVector = Polarization::D.ket();
    let raw = sagnac_state(&pump, loop_phase)?;
    raw.apply_local(
        &compensator(hwp_angle),
        &nalgebra::Matrix2::<C64>::identity(),
    )
}

/// Phase of the delivered state for a given compensator angle.
pub fn delivered_phase(loop_phase: f64, hwp_angle: f64) -> f64 {
    compensator_phase(loop_phase, hwp_angle)
}

fn tomography_for(
    state: &TwoQubitState,
    model: &ChannelRateModel,
    power: f64,
    time: f64,
    target: f64,
    seed: u64,
) -> Result<(TomographyTable, f64, f64, f64, TwoQubitState)> {
    let rates = expected_coincidences(model, power)?;
    let table = simulate_tomography(state, rates.true_rate, rates.accidental_rate, time, seed)?;
    let opts = MleOptions::default();
    let raw = mle_from_counts(&table.counts.map(|r| r.map(|n| n as f64)), &opts)?.state;
    let net = mle_from_counts(&table.subtracted(), &opts)?.state;
    let model_f = werner_fidelity(rates.signal_fraction());
    Ok((
        table,
        fidelity(&raw, target),
        fidelity(&net, target),
        model_f,
        raw,
    ))
}

fn run_tomo(sc: &Scenario, seed: u64) -> Result<TomoResult> {
    let t = &sc.tomography;
    let phi = compensation_angle(t.loop_phase);
    let state = prepared_state(t.loop_phase, phi)?;

    // D/A visibility versus delivered phase, scanned with the compensator
    let vis_seed = derive_seed(seed, 0);
    let setting = MeasurementSetting {
        signal: Basis::DA,
        idler: Basis::DA,
    };
    let mut visibility_rows = Vec::with_capacity(t.visibility_points);
    for k in 0..t.visibility_points {
        let theta = -PI + 2.0 * PI * k as f64 / (t.visibility_points - 1) as f64;
        let hwp = (theta - t.loop_phase + PI) / 4.0;
        let rho = prepared_state(t.loop_phase, hwp)?;
        let probs = setting_probabilities(&rho, setting);
        let mut sampler = PoissonSampler::new(derive_seed(vis_seed, k as u64));
        let mut counts = [0u64; 4];
        for (c, p) in counts.iter_mut().zip(probs) {
            *c = sampler.draw(t.visibility_coincidences * p)?;
        }
        let [dd, da, ad, aa] = counts.map(|c| c as f64);
        let v = visibility(dd, da, ad, aa)?;
        visibility_rows.push(VisibilityPoint {
            theta: delivered_phase(t.loop_phase, hwp),
            hwp_angle: hwp,
            counts,
            visibility: v,
            sigma: visibility_sigma(v, dd + da + ad + aa),
        });
    }

    let chan_seed = derive_seed(seed, 1);
    let mut channels = Vec::with_capacity(sc.channels.len());
    let mut tables = Vec::with_capacity(sc.channels.len());
    let mut density = None;
    for model in &sc.channels {
        let (table, raw, net, model_f, rho) = tomography_for(
            &state,
            model,
            t.pump_power,
            t.integration_time,
            t.target_phase,
            derive_seed(chan_seed, model.m as u64),
        )?;
        let rates = expected_coincidences(model, t.pump_power)?;
        let pair = sc.channel_pair(model.m);
        channels.push(ChannelFidelity {
            m: model.m,
            signal_frequency: pair.signal_frequency,
            idler_frequency: pair.idler_frequency,
            raw,
            net,
            model: model_f,
            true_rate: rates.true_rate,
            accidental_rate: rates.accidental_rate,
        });
        if model.m == t.density_channel {
            density = Some(rho);
        }
        tables.push((model.m, table));
    }

    let sweep_model = sc.channel_or_err(t.sweep_channel)?;
    let sweep_seed = derive_seed(seed, 2);
    let mut vs_power = Vec::with_capacity(t.sweep_powers.len());
    for (k, &p) in t.sweep_powers.iter().enumerate() {
        let (_, raw, net, model_f, _) = tomography_for(
            &state,
            sweep_model,
            p,
            t.sweep_integration_time,
            t.target_phase,
            derive_seed(sweep_seed, k as u64),
        )?;
        vs_power.push(PowerFidelity {
            power: p,
            raw,
            net,
            model: model_f,
        });
    }

    Ok(TomoResult {
        visibility: visibility_rows,
        compensator_angle: phi,
        channels,
        tables,
        density_channel: t.density_channel,
        density: density
            .ok_or_else(|| Error::InvalidInput("density channel not configured".into()))?,
        sweep_channel: t.sweep_channel,
        vs_power,
    })
}

/// Poisson-sampled rate series `counts / T` at each power.
fn sampled_series(
    powers: &[f64],
    time: f64,
    frequency: f64,
    rate: impl Fn(f64) -> f64,
    seed: u64,
) -> Result<PowerSeries> {
    let mut points = Vec::with_capacity(powers.len());
    for (k, &p) in powers.iter().enumerate() {
        let n = PoissonSampler::new(derive_seed(seed, k as u64)).draw(rate(p) * time)?;
        points.push((p, n as f64 / time));
    }
    Ok(PowerSeries {
        points,
        channel_frequency: frequency,
        resonant: None,
    })
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn run_power_fit(sc: &Scenario, seed: u64) -> Result<PowerFitResult> {
    let pf = &sc.power_fit;
    let src = &sc.source;
    let pump = sc.ring.pump_frequency;
    let mut lines = Vec::new();
    let mut fits = Vec::new();
    let mut truth = Vec::new();
    for k in pf.scan_first..=pf.scan_last {
        if k == 0 {
            continue;
        }
        let frequency = pump + k as f64 * pf.scan_step;
        let grid_ratio = sc.channel_spacing / pf.scan_step;
        let m_float = k.unsigned_abs() as f64 / grid_ratio;
        let on_grid = (m_float - m_float.round()).abs() < 1e-9;
        let (a, b, c) = if on_grid {
            let m = m_float.round() as u32;
            let model = src.channel(m, sc.channel_spacing, &sc.envelope);
            let arm = if k > 0 { Arm::Signal } else { Arm::Idler };
            let raman = if k > 0 { model.raman_s } else { model.raman_i };
            let dark = if k > 0 { model.dark_s } else { model.dark_i };
            (model.singles_quadratic(arm), raman, dark)
        } else {
            let raman = if k < 0 {
                pf.off_raman_low
            } else {
                pf.off_raman_high
            };
            let dark = if k > 0 { src.dark_s } else { src.dark_i };
            (0.0, raman, dark)
        };
        let series = sampled_series(
            &pf.powers,
            pf.integration_time,
            frequency,
            |p| a * p * p + b * p + c,
            derive_seed(seed, (k - pf.scan_first) as u64),
        )?;
        let fit = fit_power_quadratic(&series)?;
        fits.push(ChannelFit {
            channel_frequency: frequency,
            fit,
        });
        truth.push((k, frequency, on_grid));
    }
    let class = classify_resonant(&fits, &pf.classify)?;
    for ((k, frequency, on_grid), (f, resonant)) in
        truth.into_iter().zip(fits.iter().zip(&class.resonant))
    {
        lines.push(ScanLine {
            offset_index: k,
            frequency,
            on_grid,
            fit: f.fit,
            resonant: *resonant,
        });
    }
    Ok(PowerFitResult {
        reference_b: class.reference_b,
        mean_b_on: mean(lines.iter().filter(|l| l.resonant).map(|l| l.fit.b)),
        mean_b_off: mean(lines.iter().filter(|l| !l.resonant).map(|l| l.fit.b)),
        mean_b_off_low: mean(
            lines
                .iter()
                .filter(|l| !l.resonant && l.offset_index < 0)
                .map(|l| l.fit.b),
        ),
        mean_b_off_high: mean(
            lines
                .iter()
                .filter(|l| !l.resonant && l.offset_index > 0)
                .map(|l| l.fit.b),
        ),
        misclassified: lines.iter().filter(|l| l.resonant != l.on_grid).count(),
        lines,
    })
}

/// Mean accidental rate over all signal/idler combinations of different
/// channels, `⟨N_s,j N_i,k τ_w⟩` for `j ≠ k`.
pub fn cross_accidental_rate(models: &[ChannelRateModel], power: f64) -> Result<f64> {
    let ns: Vec<f64> = models
        .iter()
        .map(|m| expected_singles(m, Arm::Signal, power))
        .collect::<Result<_>>()?;
    let ni: Vec<f64> = models
        .iter()
        .map(|m| expected_singles(m, Arm::Idler, power))
        .collect::<Result<_>>()?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (j, mj) in models.iter().enumerate() {
        for (k, _) in models.iter().enumerate() {
            if j != k {
                sum += ns[j] * ni[k] * mj.tau_w;
                n += 1;
            }
        }
    }
    Ok(if n > 0 { sum / n as f64 } else { 0.0 })
}

fn run_jsi(sc: &Scenario, seed: u64) -> Result<JsiResult> {
    let j = &sc.jsi;
    let mut models = sc.channels.clone();
    models.sort_by_key(|m| m.m);
    let acc = cross_accidental_rate(&models, j.pump_power)?;
    let grid = jsi(
        &models,
        j.pump_power,
        acc,
        j.integration_time,
        derive_seed(seed, 0),
    )?;
    let dominance = grid.dominance();

    let model = sc.channel_or_err(j.car_channel)?;
    let car_seed = derive_seed(seed, 1);
    let mut points = Vec::with_capacity(j.car_powers.len());
    for (k, &p) in j.car_powers.iter().enumerate() {
        let rec = simulate_record(
            model,
            p,
            j.car_integration_time,
            derive_seed(car_seed, k as u64),
        )?;
        let rates = expected_coincidences(model, p)?;
        points.push(CarPoint {
            power: p,
            coincidences: rec.coincidences,
            accidentals: rec.accidentals,
            car: rec.car().value(),
            model: car(rates.total(), rates.accidental_rate)?,
        });
    }
    let car_peak_power = points
        .iter()
        .max_by(|a, b| a.car.total_cmp(&b.car))
        .map(|p| p.power)
        .unwrap_or(0.0);
    Ok(JsiResult {
        grid,
        cross_accidental_rate: acc,
        dominance,
        car_channel: j.car_channel,
        car: points,
        car_peak_power,
    })
}

fn run_metrics(sc: &Scenario, seed: u64) -> Result<MetricsResult> {
    let me = &sc.metrics;
    let mut rows = Vec::with_capacity(sc.channels.len());
    for model in &sc.channels {
        let ch_seed = derive_seed(seed, model.m as u64);
        let spec = HistogramSpec {
            bandwidth: me.bandwidth_mhz * 1e6,
            peak_counts: me.histogram_peak_counts,
            background: me.histogram_background,
            bin_width: me.histogram_bin_width,
            half_bins: me.histogram_half_bins,
            offset: 0.0,
        };
        let hist = histogram_sample(&histogram_generate(&spec)?, derive_seed(ch_seed, 0))?;
        let bw = fit_histogram(&hist)?.bandwidth / 1e6;

        let freq = sc.channel_pair(model.m).signal_frequency;
        let s = sampled_series(
            &me.powers,
            me.integration_time,
            freq,
            |p| expected_singles(model, Arm::Signal, p).unwrap_or(0.0),
            derive_seed(ch_seed, 1),
        )?;
        let i = sampled_series(
            &me.powers,
            me.integration_time,
            freq,
            |p| expected_singles(model, Arm::Idler, p).unwrap_or(0.0),
            derive_seed(ch_seed, 2),
        )?;
        // net coincidences: window counts minus the off-peak window
        let mut net = Vec::with_capacity(me.powers.len());
        let rec_seed = derive_seed(ch_seed, 3);
        for (k, &p) in me.powers.iter().enumerate() {
            let rec = simulate_record(
                model,
                p,
                me.integration_time,
                derive_seed(rec_seed, k as u64),
            )?;
            net.push((
                p,
                (rec.coincidences as f64 - rec.accidentals as f64) / me.integration_time,
            ));
        }
        let c = PowerSeries {
            points: net,
            channel_frequency: freq,
            resonant: None,
        };
        let rs = fit_power_quadratic(&s)?.a;
        let ri = fit_power_quadratic(&i)?.a;
        let rc = fit_power_quadratic(&c)?.a;
        let rate = pgr(rs, ri, rc)?;
        rows.push(ChannelMetrics {
            m: model.m,
            bandwidth_mhz: bw,
            rs,
            ri,
            rc,
            pgr: rate,
            true_pgr: model.pgr,
            brightness: spectral_brightness(rate, bw)?,
            efficiencies: efficiencies(
                rs,
                ri,
                rc,
                me.transmission_s,
                me.transmission_i,
                me.detection,
            )?,
        });
    }
    Ok(MetricsResult {
        mean_bandwidth_mhz: mean(rows.iter().map(|r| r.bandwidth_mhz)),
        mean_extraction: mean(
            rows.iter()
                .flat_map(|r| [r.efficiencies.extraction_s, r.efficiencies.extraction_i]),
        ),
        channels: rows,
    })
}

/// Channel grid of the scenario, in channel order.
pub fn channel_grid(sc: &Scenario) -> Result<Vec<ChannelPair>> {
    let n = sc.channels.iter().map(|c| c.m).max().unwrap_or(0);
    comb_grid(sc.ring.pump_frequency, sc.channel_spacing, n)
}

/// Derived seed of a stage, exposed for reproducing single draws.
pub fn stage_seed(root: u64, stage: Stage) -> u64 {
    derive_path(root, &[stage.seed_label()])
}
