//! Desk-scale simulator for open-set active learning with energy-based
//! filtering and scoring.
//!
//! The crate provides a small reverse-mode autodiff engine, synthetic
//! open-set task generators, a dual-head energy model, the training and
//! query-selection loops, baseline strategies, and metric reporting. The
//! `ebosal` binary wraps it all in a batch CLI. Everything is seeded and
//! deterministic: the same config produces byte-identical outputs.

pub mod alcycle;
pub mod autodiff;
pub mod config;
pub mod datagen;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod runner;
pub mod seeding;

pub use error::{Error, Result};
