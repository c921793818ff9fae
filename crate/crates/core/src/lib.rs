//! Desk-scale market-microstructure analysis of trade tapes: per-firm and
//! market-level instantaneous impact, response and sign-correlation
//! functions, power-law and volume-law fitting, the transient-impact
//! (bare propagator) model with kernel deconvolution, a firm-ID shuffling
//! null model, and a synthetic tape generator with known ground truth for
//! end-to-end validation.

pub mod error;
pub mod fit;
pub mod measure;
pub mod nullmodel;
pub mod propagator;
pub mod report;
pub mod study;
pub mod synth;
pub mod tape;

pub use error::{CoreError, Result};
