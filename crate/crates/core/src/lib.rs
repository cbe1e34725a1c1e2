//! Rotated-box instance segmentation from skeleton-anchored predictions.

pub mod anchors;
pub mod cli;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod maps;
pub mod net;
pub mod proposal;
pub mod rbox;
pub mod real;
pub mod scene;
pub mod skeleton;
pub mod train;

pub use error::{Error, Result};
