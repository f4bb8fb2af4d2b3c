//! Tri-level multi-objective training for implicit-feedback recommenders.
//!
//! The crate is organised around the three levels of the training loop:
//!
//! - the **inner level** ([`backbone`]) is an ordinary matrix-factorization
//!   model trained with BPR or BCE and an Adam optimizer;
//! - the **middle level** ([`sampler`]) keeps one table of group sampling
//!   weights per objective, draws objective-specific mini-batches from it and
//!   nudges the weights with signed steps after each epoch;
//! - the **outer level** ([`coordinator`]) regulates the weight of the
//!   accuracy loss with a PI controller and folds all objective losses into
//!   one scalar.
//!
//! [`trainer`] wires the levels together, [`metrics`] scores the result and
//! [`dataset`] / [`synth`] provide the data.

pub mod backbone;
pub mod coordinator;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod objectives;
pub mod rng;
pub mod sampler;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};

/// One observed (user, item) pair with dense indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Interaction {
    pub user: u32,
    pub item: u32,
    pub timestamp: u64,
}

impl Interaction {
    pub fn new(user: u32, item: u32, timestamp: u64) -> Self {
        Self { user, item, timestamp }
    }
}
