//! Monte Carlo laboratory for ergodic BSDEs driven by time-periodic
//! Ornstein-Uhlenbeck type dynamics with finite-activity Levy jumps.
//!
//! The pipeline runs bottom-up: [`levy`] and [`coefficients`] describe the
//! forward model, [`forward`] simulates it, [`ergodicity`] checks mixing,
//! [`bsde`] solves backward equations by regression, [`discounted`] and
//! [`ebsde`] run the vanishing-discount construction, and [`control`] and
//! [`powerplant`] apply it.

pub mod bsde;
pub mod coefficients;
pub mod control;
pub mod discounted;
pub mod ebsde;
pub mod ergodicity;
pub mod error;
pub mod forward;
pub mod levy;
pub mod pide;
pub mod powerplant;
pub mod regression;
pub mod rng;
pub mod stats;

pub use error::{LabError, Result};

/// Largest supported state dimension.
pub const MAX_DIM: usize = 3;
