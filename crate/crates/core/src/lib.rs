//! Parts-based facial forgery detection: region masks, a truncated
//! separable-convolution detector with per-part branches, training,
//! transfer evaluation and per-region difference statistics.

pub mod cli;
pub mod data;
pub mod error;
pub mod evaluator;
pub mod grid;
pub mod masks;
pub mod nn;
pub mod objectives;
pub mod rgb;
pub mod stats;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};
