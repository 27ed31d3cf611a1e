//! Patch-level binary mammography classification.
//!
//! The crate covers the whole pipeline: patch dataset model and stratified
//! splits ([`patchset`]), a procedural stand-in corpus ([`synthgen`]),
//! geometric augmentation ([`augment`]), declarative CNN specs with a small
//! CPU training engine ([`modelkit`]), the training loop ([`trainer`]),
//! ROC and operating-point analysis ([`metrics`]) and experiment reporting
//! ([`report`]).

pub mod augment;
pub mod error;
pub mod metrics;
pub mod modelkit;
pub mod patchset;
pub mod report;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
