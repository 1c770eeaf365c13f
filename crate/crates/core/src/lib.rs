//! Building blocks for noisy-reverberant voice conversion experiments:
//! signal processing, synthetic corpus generation, speech enhancement
//! stages and objective metrics.

pub mod corpus;
pub mod dsp;
pub mod enhance;
pub mod error;
pub mod manifest;
pub mod metrics;
pub mod seed;
pub mod wav;

pub use error::{Error, Result};
