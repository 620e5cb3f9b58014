//! Models and analysis tools for gated Geiger-mode single-photon
//! detectors at 1550 nm, and for the quantum-key-distribution links
//! built on them.
//!
//! The crate is organized around six pieces:
//!
//! - [`detector`]: parametric detector models (dark counts, afterpulse
//!   decay, timing jitter) and the built-in profile registry.
//! - [`link`]: analytic link performance — fiber transmission, raw and
//!   sifted rates, QBER and its decomposition, distance solving, time
//!   windowing and path-separation arithmetic.
//! - [`sim`]: seeded gate-by-gate Monte Carlo simulation with afterpulse
//!   memory, hold-off and jittered timestamps; the stochastic
//!   counterpart of [`link`].
//! - [`characterize`]: reduction of raw counting data into detector
//!   parameters with propagated uncertainties.
//! - [`calibrate`]: fits of the model families to measured curves or to
//!   stated operating targets.
//! - [`io`]: the CSV and plain-text file formats used by the CLI.

pub mod calibrate;
pub mod characterize;
pub mod detector;
pub mod io;
pub mod link;
pub mod profiles;
pub mod sim;

pub use detector::{
    AfterpulseModel, AfterpulseTerm, DarkCountModel, DetectorError, DetectorProfile, JitterModel,
};
pub use link::{LinkConfig, LinkError, LinkPoint};
pub use sim::{SimConfig, SimError, SimOutcome};
