//! Dynamic graph storage engine built on an LSM-tree of CSR segments.

pub mod analytics;
pub mod bloom;
pub mod engine;
mod error;
pub mod hash;
pub mod io;
pub mod levels;
pub mod memgraph;
pub mod mlindex;
pub mod segment;
pub mod version;
pub mod vertex;

pub use engine::{Engine, EngineConfig, Neighbor, ReadPlan};
pub use error::{Error, Result};
pub use version::Snapshot;

pub type VertexId = u64;
pub type Timestamp = u64;
pub type FileId = u64;
