//! Core of a desk-scale lab for agent reinforcement learning dynamics.
//!
//! A tiny attention policy is trained with group-relative policy gradients
//! (plus an optional token-level correctness classifier) on a micro tool-use
//! task, and its training dynamics are checked against exact identities
//! computed over the fully enumerated trajectory space.

pub mod diagnostics;
pub mod env;
pub mod error;
pub mod numerics;
pub mod policy;
pub mod trainer;

pub use error::{Error, Result};
