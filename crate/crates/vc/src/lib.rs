//! Gradient engine, vector-quantized bottleneck and a small voice-conversion
//! model over log-mel frames.

pub mod adam;
pub mod convert;
pub mod eval;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;
pub mod vocoder;
pub mod vq;

pub use error::{Error, Result};
