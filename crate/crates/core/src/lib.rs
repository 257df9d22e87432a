//! Cooking-object state identification.
//!
//! Covers the state taxonomy, dataset manifests and splits, a truncated
//! residual classifier with staged transfer learning, weighted soft voting,
//! and top-k evaluation.

pub mod augment;
pub mod checkpoint;
pub mod dataset;
pub mod ensemble;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod predictions;
pub mod report;
pub mod seed;
pub mod taxonomy;
pub mod training;
