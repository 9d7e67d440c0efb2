//! Multi-task RGB-D scene understanding: a partial-convolution encoder,
//! semantic and instance decoders, panoptic fusion, metrics, an adaptive
//! loss scheduler and a synthetic scene generator.

pub mod config;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod gradsuite;
pub mod grid;
pub mod instance;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod params;
pub mod scheduler;
pub mod semantic;
pub mod synth;
pub mod targets;
pub mod train;

pub use config::Config;
pub use error::{Error, Result};
pub use grid::Grid;
pub use mtscene_tensor as tensor;
