//! Discrete-time survival modelling over irregularly timed image sequences.
//!
//! A causal Transformer reads one eye's visit images together with their
//! acquisition times and emits a full hazard curve after every visit. The
//! crate bundles the differentiable substrate it runs on, a synthetic
//! longitudinal cohort with known ground truth, the training loop, and the
//! time-dependent evaluation protocol.

pub mod attention;
pub mod checkpoint;
pub mod cohort;
pub mod diff;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod survival;
pub mod trainer;

pub use error::{Error, Result};
