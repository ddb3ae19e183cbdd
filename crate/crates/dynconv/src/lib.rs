//! Training, verification, benchmarking and ponder maps for dynamic
//! convolution networks built on `dynconv-core`.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod metrics;
pub mod ponder;
pub mod train;
pub mod verify;

pub use dynconv_core as core;
