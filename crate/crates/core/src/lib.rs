//! Imbalanced semi-supervised learning with a class-rebalanced feature memory
//! bank.
//!
//! A shared encoder feeds two linear heads. The base head trains FixMatch
//! style on labeled and confidently pseudo-labeled data. The auxiliary head
//! is trained with adaptive re-weighting plus features re-sampled from a
//! class-balanced memory bank, and is the only head used for prediction.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod estimator;
pub mod membank;
pub mod metrics;
pub mod numerics;
pub mod rng;
pub mod trainer;
pub mod weighting;

pub use error::{Error, Result};
