//! Building footprint extraction from overhead imagery.
//!
//! The pipeline: split parent rasters into core tiles with a neighborhood
//! margin ([`nepagg`]), segment each augmented tile with a single-encoder,
//! dual-decoder network ([`tfnet`]) trained on summed focal losses over the
//! cropped core ([`trainer`]), convert probability maps into polygons
//! ([`polygonize`]) and score them with greedy IoU matching ([`evaluator`]).

pub mod error;
pub mod evaluator;
pub mod nepagg;
pub mod polygonize;
pub mod raster;
pub mod rastergeo;
pub mod synthgen;
pub mod tensor;
pub mod tfnet;
pub mod trainer;

pub use error::{Error, Result};
