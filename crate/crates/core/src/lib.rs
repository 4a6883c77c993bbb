//! Event-level identifiability audit for binary EHR event features.
//!
//! Patient event logs are encoded as sparse binary matrices, a case/control
//! cohort is built around a sensitive diagnosis, and a logistic attacker is
//! re-trained as the top-ranked features are removed. The resulting AUC curve
//! is classified as a fast, progressive or slow decline.

pub mod ablation;
pub mod classifier;
pub mod cohort;
pub mod commands;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod event_model;
pub mod report;
pub mod scoring;
pub mod seed;
pub mod simulation;

pub use error::{Error, Result};
