//! Unsupervised domain adaptation for hyperspectral patch classification.
//!
//! The pipeline lifts spectral patches with a pointwise stem, refines them with a
//! reversible coupling backbone, splits the result into domain-invariant and
//! domain-specific parts, suppresses channels chosen by discriminator gradients,
//! and adapts the suppression budget to the measured inter-domain shift.

pub mod backbone;
pub mod checkpoint;
pub mod disentangle;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod hsidata;
pub mod layers;
pub mod model;
pub mod objective;
pub mod optim;
pub mod rng;
pub mod ssam;
pub mod telemetry;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
