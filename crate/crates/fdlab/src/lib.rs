//! Desk-scale laboratory for public-dataset-assisted federated distillation.
//!
//! Clients train private multilayer perceptrons, exchange predictions on a
//! shared public pool, and distill the aggregate back into their own models.
//! The crate pairs that protocol with the server-side inference attacks it
//! enables (label-distribution recovery and likelihood-ratio membership
//! tests) plus the evaluation metrics used to score them.
//!
//! Everything is deterministic: each subsystem draws from its own stream of
//! a counter-based generator, so a run is reproducible bit-for-bit from a
//! single seed.

pub mod attacks;
pub mod data;
pub mod fdsim;
pub mod metrics;
pub mod nn;
pub mod rng;
