//! Multiple-hypothesis semantic SLAM.
//!
//! Measurements are associated to landmarks with a Dirichlet-process likelihood model,
//! competing associations are kept in a hypothesis tree that is resampled when its
//! weights degenerate, and completed submaps are fused into a robust pose graph that
//! also receives semantically verified loop closures.

pub mod assoc;
pub mod config;
pub mod error;
pub mod filter;
pub mod graph;
pub mod io;
pub mod mht;
pub mod pipeline;
pub mod placerec;
pub mod sim;
pub mod submap;
pub mod types;

pub use error::{Error, Result};
