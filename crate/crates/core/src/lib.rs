//! Online tracking and ear-tag identification of group-housed mice.
//!
//! The pipeline has two stages. [`tracker::Tracker`] links per-frame
//! detections into tracklets using a Kalman motion model fused with an
//! appearance embedding; [`mousemap::identify`] then assigns each tracklet
//! one of the cage's identities so that the summed ear-tag evidence is
//! maximal while no identity is in two places at once.
//!
//! [`simulator`] generates synthetic scenes with ground truth and
//! [`metrics`] scores tracker output against it.

pub mod assoc;
pub mod config;
pub mod geometry;
pub mod io;
pub mod kalman;
pub mod metrics;
pub mod mousemap;
pub mod simulator;
pub mod tracker;
pub mod types;

pub use types::{BBox, Detection, EarTagClass, Identity, Observation, Tracklet};
