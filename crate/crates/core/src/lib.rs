pub mod dataset;
pub mod error;
pub mod features;
pub mod jpeg;
pub mod model;
pub mod nn;
pub mod quant_model;
pub mod raster;
pub mod train;

pub use error::{Error, Result};
