//! Core engine for camera-based traffic enforcement: detection-stream
//! ingestion, multi-object tracking, homography speed estimation, plate
//! identity aggregation, violation ticketing, and the synthetic-scene
//! harness used to evaluate all of it.

pub mod config;
pub mod enforcement;
pub mod engine;
pub mod geometry;
pub mod metrics;
pub mod plate;
pub mod scenario;
pub mod speed;
pub mod stream;
pub mod track;

/// Stable per-stream track identifier. Never reused within an engine run.
pub type TrackId = u64;
