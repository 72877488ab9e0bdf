//! Encoder/decoder assembly, configuration presets and cost accounting.

mod config;
mod cost;
mod net;

pub use config::{ModelConfig, STEM_KERNEL};
pub use cost::{count_cost, CostReport};
pub use net::{
    frames_to_input, output_to_frames, output_to_spectrum, spectrum_to_input, Decoder,
    DecoderStream, DownBlock, Encoder, EncoderStream, Model, UpBlock,
};

#[cfg(test)]
mod tests;
