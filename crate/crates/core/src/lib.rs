//! Panoptic segmentation of sequential LiDAR scans from semantic priors and
//! per-point center offsets, with window stitching and LSTQ evaluation.

pub mod config;
pub mod formats;
pub mod geometry;
pub mod lstq;
pub mod pipeline;
pub mod proposal;
pub mod semantic;
pub mod synth;
pub mod tracker;
