//! Face sketch inversion: synthesize face sketches from aligned
//! photographs, train an 11-layer residual network to turn sketches back
//! into photographs, and measure the result.

pub mod checkpoint;
pub mod error;
pub mod identify;
pub mod image;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod pipeline;
pub mod preprocess;
pub mod sketch;
pub mod tensor;

pub use error::{Error, Result};
