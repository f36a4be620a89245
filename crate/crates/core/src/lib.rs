//! Deterministic desk-scale simulator for collective-context-field learning.
//!
//! Nodes solve synthetic tasks locally, export clipped and noised artifacts
//! through a pairwise-masked secure aggregation round, and condition their
//! private strategies on the resulting field. An aggregator filters and
//! reputation-weights the field into per-type improvement priors, and an
//! energy-adaptive scheduler decides in which trace slots protocol rounds run.
//!
//! Module map:
//!
//! * [`space`]: artifacts, the shared metric space, dispersion and learning activity
//! * [`task`]: quadratic tracking tasks and the `solve` step
//! * [`node`]: per-node state machine, validation, projection of the field, pattern update
//! * [`privacy`]: clip-and-noise projection and pairwise-mask secure aggregation
//! * [`ccf`]: field formation, anomaly detection, improvement signal, reputation
//! * [`eame`]: carbon traces, slot classification, deferrable round scheduling
//! * [`sim`]: the round engine, adversaries, consolidation, transcripts
//! * [`config`]: run configuration files and dotted-path overrides
//! * [`experiments`]: paired scenario experiments with pass/fail verdicts
//! * [`audit`]: transcript hashing and privacy-boundary audit

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audit;
pub mod ccf;
pub mod config;
pub mod eame;
pub mod error;
pub mod experiments;
pub mod node;
pub mod privacy;
pub mod rng;
pub mod sim;
pub mod space;
pub mod task;

pub use error::{Error, Result};
