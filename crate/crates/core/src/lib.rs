//! Multi-slice lesion detector: backbone, slice-attention blocks,
//! detection head, FROC scoring, synthetic volumes and training.

mod error;
pub mod backbone;
pub mod config;
pub mod dataset;
pub mod detection;
pub mod export;
pub mod froc;
pub mod layers;
pub mod model;
pub mod params;
pub mod presets;
pub mod satr;
pub mod synth;
pub mod train;

pub use error::{CoreError, Result};
