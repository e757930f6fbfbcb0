//! Partitioned HNSW vector search over simulated one-sided remote memory.

pub mod bench;
pub mod build;
pub mod data;
pub mod error;
pub mod fabric;
pub mod hnsw;
pub mod insert;
pub mod layout;
pub mod model;
pub mod partition;
pub mod query;
pub mod rebuild;
pub mod vector;

pub use error::{Error, Result};
