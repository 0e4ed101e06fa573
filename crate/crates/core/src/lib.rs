//! Modular private fine-tuning of a tiny decoder-only transformer.
//!
//! A frozen backbone is extended with a block of shared prompt embeddings,
//! trained across all domains under document-level differential privacy, and
//! with one low-rank FFN adapter per domain, trained non-privately and routed
//! deterministically by domain label. The crate also carries the Rényi-DP
//! accountant, the baseline training variants, a cross-domain membership
//! inference harness, and the evaluation metrics used to compare them.

pub mod attack;
pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod optim;
pub mod privacy;
pub mod seed;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
