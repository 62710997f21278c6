//! Synchronization of pairwise linear, affine and Euclidean transformations
//! between coordinate frames on a directed graph.

pub mod error;
pub mod graph;
pub mod linalg;
pub mod matrices;
pub mod objective;
pub mod sync_direct;
pub mod gauss_newton;
pub mod affine;
pub mod distributed;
pub mod gradient_flow;
pub mod harness;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Result, SyncError};
pub use graph::FrameGraph;
pub use matrices::{BlockMatrix, EdgeTransforms, StoragePolicy};
