//! Distributed clustering with a distributional kernel.
//!
//! The pipeline samples a subset, clusters it into `k` initial clusters,
//! summarises each cluster by its Isolation Kernel mean map, and assigns
//! every point to the most similar cluster distribution. [`simnet`] runs the
//! same pipeline over simulated sites and accounts for every transmission.

pub mod assign;
pub mod bench;
pub mod dataio;
pub mod error;
pub mod framework;
pub mod ikernel;
pub mod kbcc;
pub mod metrics;
pub mod plugins;
pub mod simnet;
pub mod union_find;

pub use error::{KdcError, Result};
