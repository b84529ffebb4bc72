//! Phenotype discovery from episodic clinical observations.
//!
//! The pipeline turns sparse, irregularly timed events and measurements into
//! dense per-patient curves, samples those curves into a cross-section matrix,
//! factors the matrix into statistically independent components, and uses the
//! per-instance component expressions as features for downstream prediction.

// Guards written as `!(x > 0.0)` are deliberate: they reject NaN along with
// nonpositive values in a single test, which `x <= 0.0` would not.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod cross_section;
pub mod curves;
pub mod error;
pub mod evaluation;
pub mod forest;
pub mod ica;
pub mod ingest;
pub mod plot;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
