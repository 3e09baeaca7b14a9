//! Occlusion-aware online multi-object tracking.
//!
//! The crate bundles the pieces of a tracking-by-detection pipeline that
//! learns appearance features without identity labels and recovers objects
//! hidden behind other objects from detected occlusion centers:
//!
//! - [`geometry`]: box arithmetic, occlusion validity and box recovery
//! - [`heatmap`]: occlusion-center heatmaps, focal/L1 losses, peak decoding
//! - [`reid_loss`]: unsupervised re-identification losses with gradients
//! - [`embedder`]: a small trainable embedding and retrieval evaluation
//! - [`kalman`]: constant-velocity box filter
//! - [`association`]: cost construction and rectangular assignment
//! - [`tracker`]: the per-frame tracking state machine with refinding
//! - [`simulator`]: deterministic synthetic scenes with occlusions
//! - [`mot`]: MOTChallenge text I/O and CLEAR-MOT / IDF1 metrics
//! - [`config`]: `key = value` settings files
//! - [`pipeline`]: sequence directories on disk and whole-sequence tracking

pub mod error;
pub mod geometry;
pub mod heatmap;
pub mod reid_loss;
pub mod embedder;
pub mod kalman;
pub mod association;
pub mod mot;
pub mod config;
pub mod simulator;
pub mod tracker;
pub mod pipeline;

pub use error::{Error, Result};
