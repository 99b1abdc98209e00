//! Pseudo outlier exposure (POE) for out-of-distribution detection in text
//! classification.
//!
//! The pipeline trains a small transformer classifier, fits class-conditional
//! Gaussian statistics on its `[CLS]` features, synthesizes near-OOD training
//! samples by masking the most attended tokens until the Mahalanobis distance
//! leaves the ID region, and re-trains the classifier as a rejection network
//! with a (K+1)-class margin contrastive loss. Post-hoc scoring rules and
//! detection metrics live in [`scoring`] and [`eval`].
//!
//! Interchangeable algorithms (masking strategies, scoring rules) are exposed
//! as trait objects registered by name; see [`poe::StrategyRegistry`] and
//! [`scoring::RuleRegistry`].

pub mod artifact;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gaussian;
pub mod poe;
pub mod rejection;
pub mod scoring;
#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
