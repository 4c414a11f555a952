//! Privacy-aware evolutionary merging of low-rank adapters.
//!
//! A target user's adapter is built as a weighted sum of adapters shared by
//! similar users. The weights are searched with a gradient-free optimizer
//! that maximizes a task metric on the target's own history while penalizing
//! similarity to each sharer's predictions. The result can be audited with a
//! loss-based membership-inference attack.

pub mod adapter;
pub mod container;
pub mod error;
pub mod evolver;
pub mod harness;
pub mod metrics;
pub mod mia;
pub mod model;
pub mod prime;
pub mod profile;

pub use error::{Error, Result};
