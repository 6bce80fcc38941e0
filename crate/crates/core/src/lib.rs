//! Time-aligned cooperative object detection at desk scale.
//!
//! The library simulates asynchronous rolling-shutter LiDAR streams from
//! multiple connected agents, fuses them with a query-based temporal-spatial
//! attention model (memory queue, motion-time-aware alignment, hybrid and
//! cross attention, spatial union-pad attention), verifies every gradient
//! against central differences, and evaluates time-aligned detections under
//! injected communication latency.

pub mod error;
pub mod evalkit;
pub mod featurizer;
pub mod fusion;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod pipeline;
pub mod scene;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
