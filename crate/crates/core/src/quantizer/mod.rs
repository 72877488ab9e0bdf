//! Vector quantization: factorized codebooks learned by EMA with dead-code
//! expiration, a replacement data pool, and a residual stack with
//! quantization dropout.

mod codebook;
mod codes;
mod kmeans;
mod pool;
mod rvq;

pub use codebook::{kmeans_init, Codebook, Quantized, EMA_EPS};
pub use codes::{bits_per_code, utilization, CodeSequence, Utilization};
pub use kmeans::{kmeans, KMeans};
pub use pool::{DataPool, MIN_POOL_CAPACITY};
pub use rvq::{commitment_loss, QuantizerConfig, RvqEncoded, RvqStack, RvqTape};

#[cfg(test)]
mod tests;
