//! Measurement-error contamination of conditional achievement gaps.
//!
//! The crate estimates the gap in a binary outcome by socioeconomic status
//! conditional on a noisy achievement score, and corrects it with lagged-score
//! instruments and errors-in-variables adjustments. A Gaussian data generator
//! with closed-form probability limits backs a Monte Carlo verifier.

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod mc;
pub mod reference;
pub mod regress;
pub mod simulate;
pub mod strategies;

pub use error::{Error, Result};
