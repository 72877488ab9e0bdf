//! Spectral front end: STFT analysis/synthesis and dynamic range
//! compression of complex bins.

mod drc;
mod stft;

pub use drc::{compress_bins, drc, dre, expand_bins, warp_bin, CompressionCoeff};
pub use rustfft::num_complex::Complex64;
pub use stft::{
    istft, periodic_hann, stft, stft_with, CenterMode, ComplexSpectrogram, SpectralScale,
    StftConfig, StftEngine, StreamingIstft, StreamingStft, WindowKind, COLA_TOLERANCE,
};
