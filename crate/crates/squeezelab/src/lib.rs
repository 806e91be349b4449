//! Desk-scale digital twin of a levitated-nanoparticle squeezing experiment.
//!
//! A silica nanoparticle is held in an optical trap at angular frequency
//! `omega0`.  Briefly dropping the trap intensity lowers the frequency to
//! `omega1`; a quarter period at the lower frequency followed by a hold at
//! the native frequency squeezes the motional state.  The state is read out
//! destructively by time-of-flight (TOF) velocimetry: release, ballistic
//! flight, recapture, and a sinusoid fit to the recapture oscillation.
//!
//! The crate is organised along that signal chain:
//!
//! * [`phasespace`] — Gaussian states and their symplectic/diffusive maps,
//! * [`protocol`] — the frequency-switch schedule and closed-form variance
//!   predictions,
//! * [`measurement`] — Monte Carlo TOF trials and photodetector traces,
//! * [`analysis`] — filtering, histogramming and least-squares estimation,
//! * [`calibration`] — voltage-to-displacement calibration by TOF
//!   thermometry and by optical-lattice frequency shifts,
//! * [`noise_budget`] — the itemised error budget for the velocity-variance
//!   noise floor.
//!
//! Everything is deterministic given a master seed: per-trial generators are
//! derived in counter mode, so results do not depend on thread count or
//! execution order.

pub mod analysis;
pub mod calibration;
pub mod constants;
pub mod error;
mod fitting;
pub mod measurement;
pub mod noise_budget;
pub mod phasespace;
pub mod protocol;
pub mod trace;

pub use error::{Error, Result};
