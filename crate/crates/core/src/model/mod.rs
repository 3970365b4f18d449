//! The segmentation pipeline and its on-disk checkpoint format.

mod checkpoint;
mod config;
mod fs_sam2;

pub use checkpoint::{Checkpoint, CheckpointKind};
pub use config::{ModelConfig, REFERENCE_IMAGE_SIZE};
pub use fs_sam2::{FeatureMap, FsSam2, MemoryBank, SegmentationOutput};
