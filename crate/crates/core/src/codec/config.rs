use serde::{Deserialize, Serialize};

use crate::dsp::{CompressionCoeff, StftConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::quantizer::QuantizerConfig;

/// Everything that fixes the meaning of a code stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub stft: StftConfig,
    /// Magnitude compression exponent `p`.
    pub compression: f64,
    pub model: ModelConfig,
    pub quantizer: QuantizerConfig,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

impl CodecConfig {
    pub fn new(model: ModelConfig, quantizer: QuantizerConfig) -> Self {
        Self {
            stft: StftConfig::default(),
            compression: CompressionCoeff::default().p(),
            model,
            quantizer,
        }
    }

    /// `base` and `mini` pair the model with the 12 x 1024 residual stack;
    /// `base-32k` uses one 32768-entry codebook.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "base" => Ok(Self::new(ModelConfig::base(), QuantizerConfig::rvq())),
            "mini" => Ok(Self::new(ModelConfig::mini(), QuantizerConfig::rvq())),
            "base-32k" => Ok(Self::new(ModelConfig::base(), QuantizerConfig::single())),
            other => Err(Error::config(format!(
                "unknown preset `{other}` (expected base, mini or base-32k)"
            ))),
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Compact JSON in field declaration order; the hash input.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn hash(&self) -> u64 {
        fnv1a64(self.canonical_json().as_bytes())
    }

    pub fn coeff(&self) -> Result<CompressionCoeff> {
        CompressionCoeff::new(self.compression)
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        self.coeff()?;
        self.model.validate()?;
        self.quantizer.validate()?;
        let rate = self.stft.sample_rate as usize / self.stft.hop;
        if rate != self.model.input_frame_rate {
            return Err(Error::config(format!(
                "STFT yields {rate} frames/s but the model expects {}",
                self.model.input_frame_rate
            )));
        }
        if self.model.input_bins > self.stft.freq_bins() {
            return Err(Error::config(format!(
                "model reads {} bins but the STFT has {}",
                self.model.input_bins,
                self.stft.freq_bins()
            )));
        }
        if self.model.frame_rate_out > u16::MAX as usize {
            return Err(Error::config(
                "latent frame rate does not fit the bitstream header",
            ));
        }
        Ok(())
    }

    pub fn frame_rate(&self) -> usize {
        self.model.frame_rate_out
    }

    /// Samples per latent frame.
    pub fn samples_per_frame(&self) -> usize {
        self.stft.hop * self.model.time_stride()
    }

    pub fn kbps(&self, n_stages: usize) -> f64 {
        self.quantizer.kbps(self.frame_rate(), n_stages)
    }

    /// Samples an input sample waits before its output is final; equals
    /// [`super::Codec::latency`] without building the model.
    pub fn latency(&self) -> usize {
        self.stft.left_pad() + self.samples_per_frame() - 1
    }
}
