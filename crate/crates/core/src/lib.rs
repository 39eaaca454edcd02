//! Reconstruction of an unknown rigid object's shape and color from an RGB
//! sequence with unknown per-frame camera poses.
//!
//! The pipeline splits the input sequence into trackable segments using the
//! apparent-area curve of the object mask, tracks an implicit occupancy/color
//! field jointly with the camera poses inside each segment, stitches the
//! per-segment trajectories into one, and finishes with a global refinement
//! of field and poses. Everything runs on the CPU in double precision and is
//! deterministic for a fixed seed.

pub mod config;
pub mod dataset;
pub mod fields;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod plot;
pub mod render;
pub mod splitter;
pub mod stitcher;
pub mod synth;
pub mod tracker;
