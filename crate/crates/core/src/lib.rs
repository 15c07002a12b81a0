//! Desk-scale laboratory for stabilized test-time adaptation.
//!
//! The crate wires together a minimal reverse-mode tensor engine, a
//! subjective-logic opinion layer over classifier logits, the conservative
//! entropy-minimization objective family, synthetic distribution-shift
//! streams, and an online adaptation engine with uncertainty metrics.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod engine;
pub mod error;
pub mod fsutil;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod opinion;
pub mod scenarios;
pub mod verify;

pub use error::{Error, Result};
