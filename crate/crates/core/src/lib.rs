//! Adaptive spectral routing for majority-vote ensembles trained on
//! Markov-dependent samples, with the baseline resamplers, synthetic
//! dependent-data generators and exact small-scale oracles used to test it.

pub mod chain_sim;
pub mod depgraph;
pub mod ensemble;
pub mod error;
pub mod harness;
pub mod knn;
pub mod metrics;
pub mod pipeline;
pub mod replay;
pub mod resampling;
pub mod rng;
pub mod spectral;
pub mod stats;
pub mod theory;

pub use error::{Error, Result};
