//! Domain model, simulation, alignment, calibration and validation metrics
//! for synchronized multimodal surgical recordings.

pub mod align;
pub mod calib;
pub mod error;
pub mod io;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod recording;
pub mod sim;
pub mod spline;

pub use error::{Error, Result};
