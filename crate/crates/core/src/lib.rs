//! Federated unlearning experiments on convex client objectives.

pub mod datagen;
pub mod error;
pub mod federation;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod objectives;
pub mod rng;
pub mod unlearning;

pub use error::{Error, Result};
