//! Multi-view promptable segmentation on pointmaps.

pub mod ablation;
pub mod bundle_io;
pub mod checkpoint;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod grid;
pub mod loss;
pub mod math;
pub mod model;
pub mod par;
pub mod params;
pub mod postprocess;
pub mod rle;
pub mod session;
pub mod rng;
pub mod scenegen;
pub mod tape;
pub mod training;

pub use error::{Error, Result};
