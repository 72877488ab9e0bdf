//! Closed-form parameter and compute accounting, derived from the config
//! alone so no weights need to be allocated.

use serde::Serialize;

use super::config::ModelConfig;
use crate::error::Result;
use crate::layers::{Conv2dSpec, GruSpec};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub encoder_params: usize,
    pub decoder_params: usize,
    /// Encoder plus decoder; quantizer codebooks are not included.
    pub params: usize,
    /// Multiply-accumulates per second of audio, encode plus decode.
    pub macs_per_second: usize,
    /// Twice the multiply-accumulate count.
    pub flops_per_second_audio: f64,
}

impl CostReport {
    /// Total including `codebook_params` quantizer parameters.
    pub fn params_with_codebooks(&self, codebook_params: usize) -> usize {
        self.params + codebook_params
    }
}

struct Rnn2dCost {
    params: usize,
    macs_per_frame: usize,
}

/// FLNorm affine, GRU, 1x1 projection, Snake.
fn rnn2d_cost(channels: usize, freq: usize, hidden: usize) -> Rnn2dCost {
    let gru = GruSpec {
        input_size: channels,
        hidden_size: hidden,
    };
    let proj = Conv2dSpec::new(hidden, channels, (1, 1), (1, 1));
    Rnn2dCost {
        params: 2 * channels + gru.param_count() + proj.param_count() + channels,
        macs_per_frame: freq * (gru.macs_per_step() + hidden * channels),
    }
}

/// Counts conv, GRU, norm affine and Snake parameters, and the
/// multiply-accumulates of the conv and GRU layers over one second.
pub fn count_cost(cfg: &ModelConfig) -> Result<CostReport> {
    cfg.validate()?;
    let freq = cfg.freq_chain()?;
    let mut frames = cfg.input_frame_rate;
    let c0 = cfg.channels[0];

    let mut enc_p = cfg.stem_spec().param_count() + c0;
    let mut dec_p = cfg.head_spec().param_count();
    // The head has the same taps, frames and bins as the stem.
    let mut macs = 2 * cfg.stem_spec().macs(frames, freq[0])?;

    for i in 0..cfg.n_blocks {
        let (c_in, c_out) = (cfg.channels[i], cfg.channels[i + 1]);
        let down = cfg.down_spec(i);
        let up = cfg.up_spec(i);
        let out_frames = down.out_frames(frames);
        let rnn = rnn2d_cost(c_out, freq[i + 1], cfg.gru_hidden(i));

        enc_p += down.param_count() + c_out + rnn.params;
        dec_p += rnn.params + up.param_count() + c_in;

        macs += down.macs(frames, freq[i])? + up.macs(out_frames, freq[i + 1])?;
        macs += 2 * out_frames * rnn.macs_per_frame;
        frames = out_frames;
    }

    Ok(CostReport {
        encoder_params: enc_p,
        decoder_params: dec_p,
        params: enc_p + dec_p,
        macs_per_second: macs,
        flops_per_second_audio: 2.0 * macs as f64,
    })
}
