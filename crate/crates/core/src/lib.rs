//! Decentralized federated learning simulator.
//!
//! Nodes hold a column each of the parameter matrix `X` and alternate
//! between local SGD steps and gossip averaging with a doubly stochastic
//! mixing matrix `C`. The crate covers the schedule itself and its D-SGD and
//! C-SGD special cases, compressed gossip (CHOCO-G) with several compression
//! operators, closed-form convergence bounds, and a seeded experiment
//! harness.

// Negated float comparisons are deliberate: they treat NaN as a failure.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod compression;
pub mod engine;
pub mod error;
pub mod harness;
pub mod objective;
pub mod seed;
pub mod topology;

pub use error::{Error, Result};
