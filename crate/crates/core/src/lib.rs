pub mod codec;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod layers;
pub mod losses;
pub mod model;
pub mod nn;
pub mod quantizer;
pub mod train;

pub use error::{Error, Result};
