//! Forecasting engine for irregularly located surface stations.
//!
//! The pipeline: build a great-circle distance graph over stations, cut it
//! into balanced subgraphs with a multilevel partitioner, encode station
//! locations with spherical harmonics, and run stacked structured-attention
//! blocks (local attention inside each subgraph, attention between pooled
//! subgraph summaries) over a nested coarsening hierarchy. Everything is
//! trained with a small reverse-mode tape on dense 64-bit tensors, so the
//! whole stack is checkable against finite differences.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod harmonics;
pub mod model;
pub mod optim;
pub mod partition;
pub mod probe;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
