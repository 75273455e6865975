//! Desk-scale simulator for a polarization-entangled quantum frequency comb
//! generated by a microring resonator placed inside a Sagnac loop.
//!
//! The crate covers the whole measurement chain:
//!
//! - [`cavity`]: Lorentzian resonances, the channel grid and resonance fitting.
//! - [`thermal`]: self-heating dynamics, hysteretic sweeps and the heater lock.
//! - [`jones`]: waveplates, Sagnac-loop state preparation and projectors.
//! - [`pair_source`]: pair, Raman and dark-count rate algebra per channel.
//! - [`counting`]: Poisson sampling, visibility, CAR and correlation bandwidth.
//! - [`tomography`]: nine-setting tomography and maximum-likelihood reconstruction.
//! - [`spectral`]: power-law fits, resonance classification, JSI and efficiencies.
//! - [`scenario`] and [`report`]: seeded end-to-end runs and file emission.
//!
//! Units follow the lab conventions: frequencies in Hz, pump powers in mW,
//! heater currents in mA, times in seconds and rates in counts per second.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cavity;
pub mod counting;
pub mod error;
pub mod jones;
pub mod lsq;
pub mod pair_source;
pub mod report;
pub mod rng;
pub mod scenario;
pub mod spectral;
pub mod state;
pub mod thermal;
pub mod tomography;

pub use error::{Error, Result};
pub use state::TwoQubitState;
