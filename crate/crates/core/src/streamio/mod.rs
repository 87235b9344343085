//! Dataset ingestion, synthetic task streams and the checkpoint container.

pub mod checkpoint;
pub mod idx;
pub mod synthetic;

pub use idx::{read_idx_dataset, Dataset, IdxArray};
pub use synthetic::{class_pattern, synthetic_stream, warped_pattern, StreamBatch, StreamSpec, TaskStream, Warp};
