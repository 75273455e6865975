//! Self-heating dynamics of the pumped resonance and the heater-current
//! feedback lock.
//!
//! The absorbed pump heats the ring and red-shifts the resonance. With
//! `s` the self-heating shift, a single-pole model gives
//!
//! ```text
//! ds/dt = (κ P (1 - T(δ)) - s) / τ_th,    δ = f_laser - f_res
//! f_res = f_cold + k_I I² + external + s
//! ```
//!
//! with `κ < 0` (Hz per mW of pump). Heating pushes the resonance below the
//! laser, so the side `δ > 0` is thermally self-stabilizing; that is where
//! the lock sits.

use serde::{Deserialize, Serialize};

use crate::cavity::{dip, thermal_shift, RingSpec};
use crate::counting::PoissonSampler;
use crate::error::{Error, Result};

/// Thermal response of the ring.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThermalModel {
    /// Thermal time constant τ_th, s.
    pub time_constant: f64,
    /// Steady-state self-heating shift per mW of dropped pump power, Hz/mW.
    pub heating_coefficient: f64,
}

impl Default for ThermalModel {
    fn default() -> Self {
        Self {
            time_constant: 10e-3,
            heating_coefficient: -0.1e9,
        }
    }
}

impl ThermalModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.time_constant > 0.0) {
            return Err(Error::param("time_constant", "must be positive"));
        }
        if !self.heating_coefficient.is_finite() {
            return Err(Error::param("heating_coefficient", "must be finite"));
        }
        Ok(())
    }

    /// Largest explicit-Euler step accepted by [`thermal_step`].
    pub fn max_step(&self) -> f64 {
        self.time_constant / 10.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ThermalState {
    /// Resonance shift caused by absorbed pump, Hz.
    pub self_heat_shift: f64,
    /// Heater current, mA.
    pub heater_current: f64,
    /// Simulation time, s.
    pub time: f64,
}

/// Resonance center for the given state and external shift (chip
/// temperature drift and the like).
pub fn resonance_frequency(spec: &RingSpec, state: &ThermalState, external_shift: f64) -> f64 {
    spec.pumped_center()
        + thermal_shift(0.0, state.heater_current, spec)
        + external_shift
        + state.self_heat_shift
}

/// Pump transmission seen by the power detector.
pub fn pump_transmission(
    spec: &RingSpec,
    state: &ThermalState,
    laser_frequency: f64,
    external_shift: f64,
) -> f64 {
    let detuning = laser_frequency - resonance_frequency(spec, state, external_shift);
    dip(detuning, spec.fwhm, spec.min_transmission)
}

/// One explicit Euler step of the self-heating equation.
pub fn thermal_step(
    state: ThermalState,
    pump_power: f64,
    laser_frequency: f64,
    external_shift: f64,
    spec: &RingSpec,
    model: &ThermalModel,
    dt: f64,
) -> Result<ThermalState> {
    if !(dt > 0.0) {
        return Err(Error::param("dt", "must be positive"));
    }
    if dt > model.max_step() * (1.0 + 1e-12) {
        return Err(Error::Stability {
            dt,
            limit: model.max_step(),
        });
    }
    let t = pump_transmission(spec, &state, laser_frequency, external_shift);
    let target = model.heating_coefficient * pump_power * (1.0 - t);
    let shift = state.self_heat_shift + dt * (target - state.self_heat_shift) / model.time_constant;
    Ok(ThermalState {
        self_heat_shift: shift,
        time: state.time + dt,
        ..state
    })
}

/// Advances `state` by `duration` in equal sub-steps no longer than
/// `τ_th / 20`.
pub fn integrate(
    mut state: ThermalState,
    pump_power: f64,
    laser_frequency: f64,
    external_shift: f64,
    spec: &RingSpec,
    model: &ThermalModel,
    duration: f64,
) -> Result<ThermalState> {
    if duration <= 0.0 {
        return Ok(state);
    }
    let n = (duration / (model.time_constant / 20.0)).ceil().max(1.0) as usize;
    let dt = duration / n as f64;
    for _ in 0..n {
        state = thermal_step(
            state,
            pump_power,
            laser_frequency,
            external_shift,
            spec,
            model,
            dt,
        )?;
    }
    Ok(state)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepDirection {
    /// Increasing heater current.
    Forward,
    /// Decreasing heater current.
    Backward,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub current: f64,
    pub transmission: f64,
}

/// Time spent at each ramp point of a heater sweep, s.
pub const DEFAULT_DWELL: f64 = 20e-3;

/// Steps the heater through `ramp` with the laser fixed at the pump
/// frequency, dwelling `dwell` seconds per point, and records the pump
/// transmission at the end of each dwell.
pub fn sweep_trace(
    spec: &RingSpec,
    model: &ThermalModel,
    pump_power: f64,
    ramp: &[f64],
    direction: SweepDirection,
    dwell: f64,
) -> Result<Vec<TracePoint>> {
    if !(pump_power >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "pump power {pump_power} is negative"
        )));
    }
    if !(dwell > 0.0) {
        return Err(Error::param("dwell", "must be positive"));
    }
    let monotone = ramp.windows(2).all(|w| match direction {
        SweepDirection::Forward => w[1] >= w[0],
        SweepDirection::Backward => w[1] <= w[0],
    });
    if !monotone {
        return Err(Error::InvalidInput(format!(
            "ramp is not monotone in the {direction:?} direction"
        )));
    }
    let Some(&first) = ramp.first() else {
        return Ok(Vec::new());
    };
    let laser = spec.pump_frequency;
    let mut state = ThermalState {
        heater_current: first,
        ..Default::default()
    };
    // settle at the starting point
    state = integrate(
        state,
        pump_power,
        laser,
        0.0,
        spec,
        model,
        10.0 * model.time_constant,
    )?;
    let mut out = Vec::with_capacity(ramp.len());
    for &current in ramp {
        state.heater_current = current;
        state = integrate(state, pump_power, laser, 0.0, spec, model, dwell)?;
        out.push(TracePoint {
            current,
            transmission: pump_transmission(spec, &state, laser, 0.0),
        });
    }
    Ok(out)
}

/// Cold-cavity (no self-heating) transmission along a ramp.
pub fn static_trace(spec: &RingSpec, ramp: &[f64]) -> Vec<TracePoint> {
    ramp.iter()
        .map(|&current| {
            let state = ThermalState {
                heater_current: current,
                ..Default::default()
            };
            TracePoint {
                current,
                transmission: pump_transmission(spec, &state, spec.pump_frequency, 0.0),
            }
        })
        .collect()
}

/// Area enclosed between a forward trace and a backward trace over the same
/// current grid (trapezoidal, in transmission × mA).
pub fn hysteresis_area(forward: &[TracePoint], backward: &[TracePoint]) -> f64 {
    let mut back: Vec<TracePoint> = backward.to_vec();
    back.sort_by(|a, b| a.current.total_cmp(&b.current));
    forward
        .windows(2)
        .zip(back.windows(2))
        .map(|(f, b)| {
            let dx = f[1].current - f[0].current;
            let g0 = (f[0].transmission - b[0].transmission).abs();
            let g1 = (f[1].transmission - b[1].transmission).abs();
            0.5 * dx * (g0 + g1)
        })
        .sum()
}

/// Proportional heater controller with deadband and step clamp.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub setpoint_transmission: f64,
    /// mA per unit of transmission error.
    pub proportional_gain: f64,
    pub deadband: f64,
    /// Largest current change per control sample, mA.
    pub max_step: f64,
    /// Control period, s.
    pub sample_period: f64,
    /// Current source limit, mA.
    pub max_current: f64,
    /// Standard deviation of the detector reading.
    #[serde(default)]
    pub detector_noise: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            setpoint_transmission: 0.05,
            proportional_gain: 0.05,
            deadband: 0.005,
            max_step: 0.01,
            sample_period: 10e-3,
            max_current: 5.0,
            detector_noise: 0.001,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.setpoint_transmission > 0.0 && self.setpoint_transmission < 1.0) {
            return Err(Error::param("setpoint_transmission", "must lie in (0, 1)"));
        }
        if !(self.proportional_gain > 0.0) {
            return Err(Error::param("proportional_gain", "must be positive"));
        }
        if !(self.deadband >= 0.0) {
            return Err(Error::param("deadband", "must be non-negative"));
        }
        if !(self.max_step > 0.0) {
            return Err(Error::param("max_step", "must be positive"));
        }
        if !(self.sample_period > 0.0) {
            return Err(Error::param("sample_period", "must be positive"));
        }
        if !(self.max_current > 0.0) {
            return Err(Error::param("max_current", "must be positive"));
        }
        if !(self.detector_noise >= 0.0) {
            return Err(Error::param("detector_noise", "must be non-negative"));
        }
        Ok(())
    }
}

/// Heater-current adjustment for one control sample.
///
/// Transmission below the setpoint means the resonance is creeping onto the
/// pump and heating up, so the current is raised to push it away; above
/// the setpoint the current is lowered. Errors inside the deadband give no
/// action. `previous_transmission` and `state` are accepted for parity with
/// the acquisition logic but the law is purely proportional.
pub fn lock_step(
    measured_transmission: f64,
    _previous_transmission: f64,
    _state: &ThermalState,
    cfg: &ControllerConfig,
) -> f64 {
    let error = cfg.setpoint_transmission - measured_transmission;
    if error.abs() <= cfg.deadband {
        return 0.0;
    }
    let magnitude = (cfg.proportional_gain * error.abs()).min(cfg.max_step);
    magnitude.copysign(error)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LockSample {
    pub time: f64,
    pub transmission: f64,
    pub current: f64,
    /// The requested current fell outside `[0, max_current]` and was clipped.
    pub saturated: bool,
}

/// Heater current and self-heating shift of the stationary operating point
/// with transmission `target` on the self-stabilizing side of the dip.
pub fn operating_point(
    spec: &RingSpec,
    model: &ThermalModel,
    pump_power: f64,
    target: f64,
    external_shift: f64,
) -> Result<ThermalState> {
    if !(target > spec.min_transmission && target < 1.0) {
        return Err(Error::InvalidInput(format!(
            "target transmission {target} unreachable with dip floor {}",
            spec.min_transmission
        )));
    }
    let lorentz = (1.0 - target) / (1.0 - spec.min_transmission);
    let detuning = 0.5 * spec.fwhm * (1.0 / lorentz - 1.0).sqrt();
    let self_shift = model.heating_coefficient * pump_power * (1.0 - target);
    // f_laser - detuning = f_cold + k_I I² + external + self_shift
    let needed =
        spec.pump_frequency - detuning - spec.pumped_center() - external_shift - self_shift;
    let i2 = needed / spec.k_current;
    if !(i2 >= 0.0) {
        return Err(Error::InvalidInput(
            "operating point needs a negative heater power".into(),
        ));
    }
    Ok(ThermalState {
        self_heat_shift: self_shift,
        heater_current: i2.sqrt(),
        time: 0.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LockRun {
    pub pump_power: f64,
    pub duration: f64,
    /// When false the heater current is held at its initial value.
    pub enabled: bool,
}

/// Closed-loop simulation starting at the setpoint operating point. The
/// detector reading carries Gaussian noise of `cfg.detector_noise` drawn
/// from `seed`; the trace records the noiseless transmission.
pub fn run_lock<F>(
    spec: &RingSpec,
    model: &ThermalModel,
    cfg: &ControllerConfig,
    run: &LockRun,
    drift: F,
    seed: u64,
) -> Result<Vec<LockSample>>
where
    F: Fn(f64) -> f64,
{
    cfg.validate()?;
    if !(run.duration > 0.0) {
        return Err(Error::param("duration", "must be positive"));
    }
    let laser = spec.pump_frequency;
    let mut state = operating_point(
        spec,
        model,
        run.pump_power,
        cfg.setpoint_transmission,
        drift(0.0),
    )?;
    let steps = (run.duration / cfg.sample_period).round().max(1.0) as usize;
    let mut noise = PoissonSampler::new(seed);
    let mut previous = cfg.setpoint_transmission;
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let t0 = state.time;
        let n = (cfg.sample_period / (model.time_constant / 20.0))
            .ceil()
            .max(1.0) as usize;
        let dt = cfg.sample_period / n as f64;
        for k in 0..n {
            let ext = drift(t0 + k as f64 * dt);
            state = thermal_step(state, run.pump_power, laser, ext, spec, model, dt)?;
        }
        let ext = drift(state.time);
        let truth = pump_transmission(spec, &state, laser, ext);
        let measured = truth + cfg.detector_noise * noise.gaussian();
        let mut saturated = false;
        if run.enabled {
            let requested = state.heater_current + lock_step(measured, previous, &state, cfg);
            let clipped = requested.clamp(0.0, cfg.max_current);
            saturated = clipped != requested;
            state.heater_current = clipped;
        }
        previous = measured;
        out.push(LockSample {
            time: state.time,
            transmission: truth,
            current: state.heater_current,
            saturated,
        });
    }
    Ok(out)
}

/// Drift of the cold resonance with time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Drift {
    None,
    Sinusoid {
        amplitude: f64,
        period: f64,
    },
    /// Constant rate, Hz/s.
    Ramp {
        rate: f64,
    },
    /// Piecewise-linear samples `(time s, shift Hz)`, held constant outside.
    Table {
        points: Vec<(f64, f64)>,
    },
}

impl Drift {
    pub fn at(&self, t: f64) -> f64 {
        match self {
            Drift::None => 0.0,
            Drift::Sinusoid { amplitude, period } => {
                amplitude * (2.0 * std::f64::consts::PI * t / period).sin()
            }
            Drift::Ramp { rate } => rate * t,
            Drift::Table { points } => {
                if points.is_empty() {
                    return 0.0;
                }
                if t <= points[0].0 {
                    return points[0].1;
                }
                for w in points.windows(2) {
                    let ((t0, y0), (t1, y1)) = (w[0], w[1]);
                    if t <= t1 {
                        let f = if t1 > t0 { (t - t0) / (t1 - t0) } else { 1.0 };
                        return y0 + f * (y1 - y0);
                    }
                }
                points[points.len() - 1].1
            }
        }
    }
}
