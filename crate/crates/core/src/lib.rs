//! Video panoptic segmentation at desk scale: a dynamic-kernel segmenter extended
//! with kernel association embeddings, cross-frame kernel linking and fusion,
//! an online tracker, video panoptic metrics and a synthetic benchmark.

pub mod error;
pub mod harness;
pub mod heads;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod panoptic;
pub mod synth;
pub mod tracker;
pub mod video;

pub use candle_core::DType;
pub use error::{Error, Result};
