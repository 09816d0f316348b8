//! Bag-level multi-instance classification with confounder dictionaries.
//!
//! A bag is a set of instance feature vectors carrying a single label. This
//! crate trains permutation-invariant aggregators over bags, clusters bag
//! features into a dictionary of context strata, and retrains the classifier
//! on backdoor-adjusted features so that predictions rest on bag content
//! rather than on spurious context cues. A seeded synthetic generator
//! produces confounded benchmarks where the context shift between train and
//! test splits is controlled exactly.
//!
//! Everything is deterministic given the seeds: generation, clustering,
//! initialization, and training order.

pub mod agg;
pub mod confounders;
pub mod data;
pub mod error;
pub mod intervention;
pub mod matrix;
pub mod metrics;
pub mod store;
pub mod synth;
pub mod tape;
pub mod trainer;

pub use error::{Error, Result};
pub use matrix::Matrix;
