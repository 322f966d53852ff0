//! dgsc-core: loss-landscape degeneracy toolkit.
//!
//! Measures the local learning coefficient (LLC) of differentiable models
//! with a localized SGLD sampler, cross-checks it against a Monte-Carlo
//! volume-scaling oracle on analytic potentials, detects developmental
//! stages in LLC-over-training curves, and ships a desk-scale in-context
//! linear regression transformer with a behavioral/structural metric suite.

pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod par;
pub mod params;
pub mod potentials;
pub mod rng;
pub mod sgld;
pub mod scalar;
pub mod train;
pub mod transformer;
pub mod geometry;
pub mod io;
pub mod volume;

pub use error::{CoreError, Result};
