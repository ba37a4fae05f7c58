//! Preemptive runtime verification for learned action policies.
//!
//! The crate covers the whole offline and online pipeline: labeling recorded
//! rollouts with safety-aware chunk advantages, pooling multimodal features,
//! training a dual-branch verifier under heavy class imbalance, and gating a
//! policy at run time by resampling candidate action chunks.

pub mod config;
pub mod error;
pub mod features;
pub mod labeler;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod scheduler;
pub mod simenv;
pub mod trace_model;
pub mod training;
pub mod verifier;

pub use error::{Error, Result};
