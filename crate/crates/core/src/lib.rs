//! Pseudo-environment discovery and group-robust training.
//!
//! The pipeline trains a small identification network, turns its feature maps
//! into normalized Gram-matrix style vectors, compresses them with a ±1 random
//! projection, clusters them with k-means, and then trains a classifier that
//! minimizes the worst loss over the resulting (cluster, class) pseudo-groups.

pub mod clustering;
pub mod error;
pub mod evalmatch;
pub mod nets;
pub mod pipeline;
pub mod projection;
pub mod robusttrain;
pub mod rng;
pub mod stylefeat;
pub mod synthdata;
pub mod tensor;

mod par;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Version stamped into every JSON report and sidecar.
pub const SCHEMA_VERSION: u32 = 1;
