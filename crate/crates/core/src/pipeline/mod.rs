//! Streaming tracker built on the backbone, correlation, and transformer.

mod crop;
mod decode;
mod tracker;

pub use crop::{context_side, crop_patch, crop_region};
pub use decode::{argmax, box_from_offsets, cell_center, decode, foreground_scores, patch_to_image, Decoded};
pub use tracker::{FrameRecord, TrackOutput, Tracker, TrackerState};
