//! Cross-range feature adaptation for LiDAR bird's-eye-view detection.
//!
//! A synthetic LiDAR benchmark whose point density decays with range, a small
//! BEV detector split at an aligned feature layer, adversarial (global) and
//! similarity-weighted (local) adaptation losses at that layer, and a
//! KITTI-style evaluation by range band.

pub mod adapt;
pub mod bev;
pub mod checkpoint;
pub mod config;
pub mod data_io;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod geometry;
pub mod gradsuite;
pub mod lidar_sim;
pub mod nn;
pub mod train;

pub use error::{Error, Result};
