//! Environment inference for invariant learning on ColoredMNIST.
//!
//! An ERM reference model is trained on the spuriously colored training set,
//! its penultimate representation is clustered with k-means, and the minority
//! class of every cluster (the conflict samples) seeds two training
//! environments for IRMv1.

pub mod cluster;
pub mod colored;
pub mod config;
pub mod envs;
pub mod erm;
pub mod error;
pub mod eval;
pub mod irm;
pub mod mnist;
pub mod nn;
pub mod persist;
pub mod pipeline;
pub mod report;
pub mod rng;

pub use error::{Error, Result};
