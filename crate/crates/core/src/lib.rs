//! Motion-warped feature memories for online video object detection.

pub mod conv;
pub mod detection;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod memory;
pub mod model;
pub mod motion;
pub mod params;
pub mod pipeline;
pub mod tensor;
pub mod training;
pub mod warp;
pub mod worldgen;

pub use error::{Error, Result};
pub use tensor::{DisplacementField, FeatureMap, Real};
