//! Verification of high-level driving actions against traffic rules using
//! reachable sets over a temporal-logic fragment.

pub mod actions;
pub mod decision;
pub mod error;
pub mod failsafe;
pub mod geometry;
pub mod ltlf;
pub mod prediction;
pub mod reach;
pub mod rules;
pub mod scenario;

pub use error::{Error, Result, SchemaViolation};
