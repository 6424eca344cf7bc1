//! Desk-scale text spotting built around two mechanisms: a linear-cost
//! efficient-mixer encoder over multi-level feature tokens, and proposal
//! sampling along Catmull-Rom centerlines.

pub mod bench;
pub mod encoder;
pub mod error;
pub mod fscrs;
pub mod metrics;
pub mod model;
pub mod plot;
pub mod raster;
pub mod synth;
pub mod tensor;

pub use error::{Error, ErrorKind, Result};
