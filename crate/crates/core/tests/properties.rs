use std::f64::consts::PI;

use nalgebra::Matrix2;
use proptest::prelude::*;

use qfc_core::cavity::{transmission, RingSpec};
use qfc_core::jones::{
    compensation_angle, compensator, compensator_phase, relative_phase, retarder,
    setting_probabilities, wrap_phase, JonesVector, MeasurementSetting,
};
use qfc_core::pair_source::ideal_state;
use qfc_core::rng::{derive_path, derive_seed, rng_from_seed};
use qfc_core::spectral::{efficiencies, fit_power_quadratic, pgr, PowerSeries};
use qfc_core::state::{random_state, C64, STATE_TOLERANCE};
use qfc_core::thermal::{
    hysteresis_area, lock_step, sweep_trace, ControllerConfig, SweepDirection, ThermalModel,
    ThermalState, DEFAULT_DWELL,
};
use qfc_core::tomography::{fidelity, linear_inversion_matrix, mle_from_counts, MleOptions};

fn angle() -> impl Strategy<Value = f64> {
    -PI..PI
}

proptest! {
    #[test]
    fn retarders_are_unitary(gamma in 0.0..2.0 * PI, alpha in angle()) {
        let u = retarder(gamma, alpha);
        let err = (u.adjoint() * u - Matrix2::<C64>::identity()).norm();
        prop_assert!(err < 1e-12);
    }

    #[test]
    fn compensator_adds_four_times_the_plate_angle(theta in angle(), phi in 0.0..PI) {
        let d = wrap_phase(compensator_phase(theta, phi) - (4.0 * phi + theta - PI));
        prop_assert!(d.abs() < 1e-10);
    }

    #[test]
    fn compensation_angle_cancels_the_phase(theta in angle()) {
        let phi = compensation_angle(theta);
        prop_assert!((0.0..PI / 2.0).contains(&phi));
        let input = JonesVector::new(C64::new(1.0, 0.0), C64::from_polar(1.0, theta));
        prop_assert!(relative_phase(&(compensator(phi) * input)).abs() < 1e-9);
    }

    #[test]
    fn transmission_stays_between_floor_and_one(
        detuning in -1e11..1e11f64,
        fwhm in 1e6..1e10f64,
        tmin in 0.0..1.0f64,
    ) {
        let t = transmission(detuning, fwhm, tmin).unwrap();
        prop_assert!(t >= tmin - 1e-15 && t <= 1.0 + 1e-15);
    }

    #[test]
    fn pgr_ignores_a_common_loss_on_one_arm(
        r in 1e2..1e8f64,
        es in 1e-3..1.0f64,
        ei in 1e-3..1.0f64,
        k in 1e-3..1.0f64,
    ) {
        let (rs, ri, rc) = (es * r, ei * r, es * ei * r);
        let base = pgr(rs, ri, rc).unwrap();
        let lossy = pgr(k * rs, ri, k * rc).unwrap();
        prop_assert!((lossy - base).abs() <= 1e-12 * base);
    }

    #[test]
    fn efficiencies_swap_with_arm_labels(
        rs in 1e2..1e5f64,
        ri in 1e2..1e5f64,
        frac in 1e-3..1.0f64,
        ts in 0.1..1.0f64,
        ti in 0.1..1.0f64,
        det in 0.1..1.0f64,
    ) {
        let rc = frac * rs.min(ri);
        let a = efficiencies(rs, ri, rc, ts, ti, det).unwrap();
        let b = efficiencies(ri, rs, rc, ti, ts, det).unwrap();
        prop_assert!((a.eta_s - b.eta_i).abs() <= 1e-12 * a.eta_s);
        prop_assert!((a.eta_i - b.eta_s).abs() <= 1e-12 * a.eta_i);
        prop_assert!((a.extraction_s - b.extraction_i).abs() <= 1e-12 * a.extraction_s);
        prop_assert_eq!(a.consistent, b.consistent);
    }

    #[test]
    fn lock_step_is_odd_and_bounded(e in 0.0..0.05f64) {
        let cfg = ControllerConfig::default();
        let st = ThermalState::default();
        let sp = cfg.setpoint_transmission;
        let below = lock_step(sp - e, sp, &st, &cfg);
        let above = lock_step(sp + e, sp, &st, &cfg);
        prop_assert!((below + above).abs() < 1e-12);
        prop_assert!(below.abs() <= cfg.max_step);
        if e <= cfg.deadband {
            prop_assert_eq!(below, 0.0);
        } else {
            prop_assert!(below > 0.0);
        }
    }

    #[test]
    fn noiseless_power_series_is_fit_exactly(
        a in 0.0..1e4f64,
        b in 0.0..1e4f64,
        c in 0.0..1e3f64,
    ) {
        let points = (1..=8).map(|k| {
            let p = 0.25 * k as f64;
            (p, a * p * p + b * p + c)
        }).collect();
        let fit = fit_power_quadratic(&PowerSeries { points, channel_frequency: 0.0, resonant: None }).unwrap();
        let scale = a.max(b).max(c).max(1.0);
        prop_assert!((fit.a - a).abs() < 1e-7 * scale);
        prop_assert!((fit.b - b).abs() < 1e-7 * scale);
        prop_assert!((fit.c - c).abs() < 1e-7 * scale);
    }

    #[test]
    fn ideal_state_fidelity_follows_cosine(theta in angle()) {
        let f = fidelity(&ideal_state(theta), 0.0);
        prop_assert!((f - 0.5 * (1.0 + theta.cos())).abs() < 1e-12);
    }

    #[test]
    fn seed_paths_fold_left(root in any::<u64>(), a in any::<u64>(), b in any::<u64>()) {
        prop_assert_eq!(derive_path(root, &[]), root);
        prop_assert_eq!(derive_path(root, &[a, b]), derive_seed(derive_seed(root, a), b));
    }
}

fn expected_counts(
    seed: u64,
    rank: usize,
    per_setting: f64,
) -> ([[f64; 4]; 9], qfc_core::TwoQubitState) {
    let rho = random_state(&mut rng_from_seed(seed), rank).unwrap();
    let mut counts = [[0.0; 4]; 9];
    for (row, setting) in counts.iter_mut().zip(MeasurementSetting::all()) {
        for (c, p) in row.iter_mut().zip(setting_probabilities(&rho, setting)) {
            *c = per_setting * p;
        }
    }
    (counts, rho)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn linear_inversion_is_exact_on_expected_counts(seed in any::<u64>(), rank in 1usize..=4) {
        let (counts, rho) = expected_counts(seed, rank, 1e4);
        let est = linear_inversion_matrix(&counts).unwrap();
        prop_assert!((est - rho.matrix()).norm() < 1e-9);
    }

    #[test]
    fn mle_returns_a_physical_state(
        cells in prop::collection::vec(0u32..500, 36),
        seed in any::<u64>(),
    ) {
        let mut counts = [[0.0; 4]; 9];
        for (k, c) in cells.iter().enumerate() {
            counts[k / 4][k % 4] = *c as f64;
        }
        // every setting needs at least one event
        for (j, row) in counts.iter_mut().enumerate() {
            if row.iter().sum::<f64>() == 0.0 {
                row[(seed as usize + j) % 4] = 1.0;
            }
        }
        let rep = mle_from_counts(&counts, &MleOptions::default()).unwrap();
        prop_assert!((rep.state.trace() - 1.0).abs() <= STATE_TOLERANCE);
        prop_assert!(rep.state.min_eigenvalue() >= -1e-10);
        prop_assert!(rep.state.validate().is_ok());
        prop_assert!(rep.log_likelihood.windows(2).all(|w| w[1] >= w[0]));
    }
}

fn area_at(power: f64) -> f64 {
    let spec = RingSpec::default();
    let model = ThermalModel::default();
    let ramp: Vec<f64> = (0..=300).map(|k| 0.01 * k as f64).collect();
    let mut back = ramp.clone();
    back.reverse();
    let f = sweep_trace(
        &spec,
        &model,
        power,
        &ramp,
        SweepDirection::Forward,
        DEFAULT_DWELL,
    )
    .unwrap();
    let b = sweep_trace(
        &spec,
        &model,
        power,
        &back,
        SweepDirection::Backward,
        DEFAULT_DWELL,
    )
    .unwrap();
    hysteresis_area(&f, &b)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn hysteresis_vanishes_at_low_power(power in 0.0..0.01f64) {
        prop_assert!(area_at(power) < 1e-3);
    }

    #[test]
    fn hysteresis_grows_with_power(p in 0.3..2.5f64, step in 0.2..1.0f64) {
        prop_assert!(area_at(p + step) > area_at(p));
    }
}
