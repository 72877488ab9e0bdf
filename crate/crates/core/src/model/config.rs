use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Conv2dSpec;

/// Kernel of the first convolution, applied with one bin of frequency
/// padding on each side so it keeps the bin count.
pub const STEM_KERNEL: (usize, usize) = (3, 3);

/// Architecture hyper-parameters. Serialized as JSON with these key names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub channels: Vec<usize>,
    pub kernels: Vec<(usize, usize)>,
    pub strides: Vec<(usize, usize)>,
    pub latent_dim: usize,
    pub frame_rate_out: usize,
    /// Frequency bins presented to the encoder (Nyquist dropped).
    #[serde(default = "default_input_bins")]
    pub input_bins: usize,
    /// STFT frames per second feeding the encoder.
    #[serde(default = "default_input_frame_rate")]
    pub input_frame_rate: usize,
    /// GRU hidden width of a block = round(block channels x this factor).
    #[serde(default = "default_gru_hidden_scale")]
    pub gru_hidden_scale: f64,
    #[serde(default = "default_true")]
    pub rnn_residual: bool,
}

fn default_input_bins() -> usize {
    256
}

fn default_input_frame_rate() -> usize {
    100
}

fn default_gru_hidden_scale() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    fn with_channels(channels: Vec<usize>) -> Self {
        let latent_dim = *channels.last().expect("non-empty");
        Self {
            n_blocks: 4,
            channels,
            kernels: vec![(3, 4); 4],
            strides: vec![(1, 4), (1, 4), (1, 4), (2, 4)],
            latent_dim,
            frame_rate_out: 50,
            input_bins: default_input_bins(),
            input_frame_rate: default_input_frame_rate(),
            gru_hidden_scale: default_gru_hidden_scale(),
            rnn_residual: true,
        }
    }

    pub fn base() -> Self {
        Self::with_channels(vec![192, 256, 384, 800, 1280])
    }

    pub fn mini() -> Self {
        Self::with_channels(vec![16, 24, 32, 64, 96])
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "base" => Ok(Self::base()),
            "mini" => Ok(Self::mini()),
            other => Err(Error::config(format!("unknown model preset `{other}`"))),
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Channels scaled by `k`, latent width following.
    pub fn scaled(&self, k: usize) -> Self {
        let mut c = self.clone();
        c.channels.iter_mut().for_each(|v| *v *= k);
        c.latent_dim *= k;
        c
    }

    /// Product of the time strides.
    pub fn time_stride(&self) -> usize {
        self.strides.iter().map(|s| s.0).product()
    }

    pub fn stem_spec(&self) -> Conv2dSpec {
        Conv2dSpec::new(2, self.channels[0], STEM_KERNEL, (1, 1)).with_freq_pad(1, 1)
    }

    pub fn head_spec(&self) -> Conv2dSpec {
        Conv2dSpec::new(self.channels[0], 2, STEM_KERNEL, (1, 1)).with_freq_pad(1, 1)
    }

    pub fn down_spec(&self, i: usize) -> Conv2dSpec {
        Conv2dSpec::new(
            self.channels[i],
            self.channels[i + 1],
            self.kernels[i],
            self.strides[i],
        )
    }

    pub fn up_spec(&self, i: usize) -> Conv2dSpec {
        Conv2dSpec::new(
            self.channels[i + 1],
            self.channels[i],
            self.kernels[i],
            self.strides[i],
        )
        .transposed()
    }

    /// GRU hidden width of the recurrent block after down-sampling block `i`.
    pub fn gru_hidden(&self, i: usize) -> usize {
        ((self.channels[i + 1] as f64 * self.gru_hidden_scale).round() as usize).max(1)
    }

    /// Bin count at each level: `input_bins` then after every block.
    pub fn freq_chain(&self) -> Result<Vec<usize>> {
        let mut f = vec![self.input_bins];
        for i in 0..self.n_blocks {
            let next = self
                .down_spec(i)
                .out_freq(f[i])
                .map_err(|e| Error::config(format!("block {i}: {e}")))?;
            f.push(next);
        }
        Ok(f)
    }

    /// Bins at the bottleneck.
    pub fn latent_freq(&self) -> Result<usize> {
        Ok(*self.freq_chain()?.last().expect("non-empty"))
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_blocks;
        if n == 0 {
            return Err(Error::config("n_blocks must be at least 1"));
        }
        if self.channels.len() != n + 1 {
            return Err(Error::config(format!(
                "channels has {} entries, n_blocks = {n} needs {}",
                self.channels.len(),
                n + 1
            )));
        }
        if self.kernels.len() != n || self.strides.len() != n {
            return Err(Error::config(format!(
                "kernels ({}) and strides ({}) must both have n_blocks = {n} entries",
                self.kernels.len(),
                self.strides.len()
            )));
        }
        if let Some(i) = self.channels.iter().position(|&c| c == 0) {
            return Err(Error::config(format!("channels[{i}] is zero")));
        }
        if !(self.gru_hidden_scale.is_finite() && self.gru_hidden_scale > 0.0) {
            return Err(Error::config(
                "gru_hidden_scale must be positive and finite",
            ));
        }
        if self.input_bins == 0 || self.input_frame_rate == 0 {
            return Err(Error::config(
                "input_bins and input_frame_rate must be positive",
            ));
        }
        for i in 0..n {
            self.down_spec(i)
                .validate()
                .map_err(|e| Error::config(format!("block {i}: {e}")))?;
        }
        let f = self.latent_freq()?;
        if self.latent_dim != self.channels[n] * f {
            return Err(Error::config(format!(
                "latent_dim {} must equal final channels {} x final bins {f}",
                self.latent_dim, self.channels[n]
            )));
        }
        let s = self.time_stride();
        if self.input_frame_rate % s != 0 || self.input_frame_rate / s != self.frame_rate_out {
            return Err(Error::config(format!(
                "time strides multiply to {s}: {} fps in gives {} fps, frame_rate_out says {}",
                self.input_frame_rate,
                self.input_frame_rate as f64 / s as f64,
                self.frame_rate_out
            )));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::base()
    }
}
