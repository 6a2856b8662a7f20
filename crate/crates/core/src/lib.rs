//! Desk-scale Bayesian deep learning: posterior approximations, calibration
//! metrics, HMC reference posteriors and synthetic distribution-shift tasks.

pub mod bench;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod posterior;
pub mod reference;
pub mod rng;

pub use error::{Error, Result};
