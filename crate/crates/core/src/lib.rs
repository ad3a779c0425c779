//! Adaptive test-time training for tabular classifiers under domain shift.
//!
//! The crate covers the whole pipeline: a small reverse-mode differentiation engine,
//! a Y-shaped network with a recency gate and learned prototypes, feature-aware
//! masking, entropic transport toward the prototypes, per-instance adaptation with
//! reset, and an exhaustive checker for the information-theoretic error bounds.

pub mod bounds;
pub mod cli;
pub mod datagen;
pub mod diffcore;
pub mod engine;
pub mod experiment;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod persist;
pub mod transport;
