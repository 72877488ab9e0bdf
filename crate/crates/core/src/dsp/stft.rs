//! Windowed STFT analysis and overlap-add synthesis.
//!
//! Frames are `win_length` samples, zero-padded to `n_fft` for the FFT.
//! Causal framing prepends `win_length - hop` zeros so that every new hop of
//! input completes exactly one frame; the batch transforms run the same
//! per-frame code as the streaming ones, so both produce identical values.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    /// Hann analysis, rectangular synthesis.
    Hann,
    /// Square-root Hann for both analysis and synthesis.
    SqrtHann,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterMode {
    /// `win_length - hop` leading zeros, no lookahead.
    Causal,
    /// `win_length / 2` zeros on both ends.
    Centered,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub win_length: usize,
    pub hop: usize,
    pub window: WindowKind,
    pub center_mode: CenterMode,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16000,
            n_fft: 512,
            win_length: 320,
            hop: 160,
            window: WindowKind::SqrtHann,
            center_mode: CenterMode::Causal,
        }
    }
}

/// Tolerance on the overlap-add window sum.
pub const COLA_TOLERANCE: f64 = 1e-10;

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.win_length == 0 || self.n_fft == 0 {
            return Err(Error::config("n_fft, win_length and hop must be positive"));
        }
        if self.win_length > self.n_fft {
            return Err(Error::config(format!(
                "win_length {} exceeds n_fft {}",
                self.win_length, self.n_fft
            )));
        }
        if self.hop > self.win_length {
            return Err(Error::config("hop larger than the window leaves gaps"));
        }
        if self.n_fft % 2 != 0 {
            return Err(Error::config("n_fft must be even"));
        }
        if self.sample_rate as usize % self.hop != 0 {
            return Err(Error::config(format!(
                "sample rate {} is not a multiple of hop {}",
                self.sample_rate, self.hop
            )));
        }
        let dev = self.cola_deviation();
        if dev > COLA_TOLERANCE {
            return Err(Error::config(format!(
                "window/hop pair violates overlap-add (deviation {dev:e})"
            )));
        }
        Ok(())
    }

    /// Retained bins per frame: DC through Nyquist.
    pub fn freq_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop as f64
    }

    pub fn left_pad(&self) -> usize {
        match self.center_mode {
            CenterMode::Causal => self.win_length - self.hop,
            CenterMode::Centered => self.win_length / 2,
        }
    }

    pub fn analysis_window(&self) -> Vec<f64> {
        let hann = periodic_hann(self.win_length);
        match self.window {
            WindowKind::Hann => hann,
            WindowKind::SqrtHann => hann.into_iter().map(f64::sqrt).collect(),
        }
    }

    pub fn synthesis_window(&self) -> Vec<f64> {
        match self.window {
            WindowKind::Hann => vec![1.0; self.win_length],
            WindowKind::SqrtHann => self.analysis_window(),
        }
    }

    /// `sum_k wa(n - kH) ws(n - kH)` over one hop period.
    pub fn overlap_sum(&self) -> Vec<f64> {
        let wa = self.analysis_window();
        let ws = self.synthesis_window();
        let mut sum = vec![0.0; self.hop];
        for (m, (a, s)) in wa.iter().zip(&ws).enumerate() {
            sum[m % self.hop] += a * s;
        }
        sum
    }

    pub fn cola_deviation(&self) -> f64 {
        let sum = self.overlap_sum();
        let mean = sum.iter().sum::<f64>() / sum.len() as f64;
        sum.iter().fold(0.0, |m, v| f64::max(m, (v - mean).abs()))
    }

    /// Number of frames the batch transform yields for `len` samples.
    pub fn frame_count(&self, len: usize) -> usize {
        match self.center_mode {
            CenterMode::Causal => len / self.hop,
            CenterMode::Centered => len / self.hop + 1,
        }
    }
}

pub fn periodic_hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpectralScale {
    Linear,
    Compressed,
}

impl SpectralScale {
    pub fn name(self) -> &'static str {
        match self {
            SpectralScale::Linear => "linear",
            SpectralScale::Compressed => "compressed",
        }
    }
}

/// Time x frequency grid of complex bins.
#[derive(Clone, Debug)]
pub struct ComplexSpectrogram {
    frames: usize,
    bins: usize,
    data: Vec<Complex64>,
    config: StftConfig,
    scale: SpectralScale,
    signal_len: usize,
}

impl ComplexSpectrogram {
    pub fn new(
        frames: usize,
        data: Vec<Complex64>,
        config: StftConfig,
        scale: SpectralScale,
        signal_len: usize,
    ) -> Result<Self> {
        let bins = config.freq_bins();
        if data.len() != frames * bins {
            return Err(Error::shape(format!(
                "spectrogram needs {frames}x{bins} bins, got {}",
                data.len()
            )));
        }
        Ok(Self {
            frames,
            bins,
            data,
            config,
            scale,
            signal_len,
        })
    }

    pub fn zeros(frames: usize, config: StftConfig, signal_len: usize) -> Self {
        let bins = config.freq_bins();
        Self {
            frames,
            bins,
            data: vec![Complex64::new(0.0, 0.0); frames * bins],
            config,
            scale: SpectralScale::Linear,
            signal_len,
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn freq_bins(&self) -> usize {
        self.bins
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn scale(&self) -> SpectralScale {
        self.scale
    }

    pub fn signal_len(&self) -> usize {
        self.signal_len
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn frame(&self, t: usize) -> &[Complex64] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [Complex64] {
        &mut self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub(crate) fn with_scale(mut self, scale: SpectralScale) -> Self {
        self.scale = scale;
        self
    }
}

/// FFT plans and windows for one configuration.
#[derive(Clone)]
pub struct StftEngine {
    cfg: StftConfig,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    wa: Vec<f64>,
    /// Synthesis window divided by the overlap sum.
    ws: Vec<f64>,
}

impl std::fmt::Debug for StftEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StftEngine")
            .field("cfg", &self.cfg)
            .finish_non_exhaustive()
    }
}

impl StftEngine {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(cfg.n_fft);
        let inv = planner.plan_fft_inverse(cfg.n_fft);
        let sum = cfg.overlap_sum();
        let norm = sum.iter().sum::<f64>() / sum.len() as f64;
        let ws = cfg
            .synthesis_window()
            .into_iter()
            .map(|w| w / norm)
            .collect();
        Ok(Self {
            cfg,
            fwd,
            inv,
            wa: cfg.analysis_window(),
            ws,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    /// Synthesis window already divided by the overlap sum.
    pub(crate) fn synthesis(&self) -> &[f64] {
        &self.ws
    }

    pub(crate) fn fft_forward(&self) -> &Arc<dyn Fft<f64>> {
        &self.fwd
    }

    /// Spectrum of one `win_length`-sample frame.
    pub fn analyze_frame(&self, frame: &[f64], out: &mut [Complex64]) {
        debug_assert_eq!(frame.len(), self.cfg.win_length);
        let mut buf = vec![Complex64::new(0.0, 0.0); self.cfg.n_fft];
        for ((b, &x), &w) in buf.iter_mut().zip(frame).zip(&self.wa) {
            b.re = x * w;
        }
        self.fwd.process(&mut buf);
        out.copy_from_slice(&buf[..self.cfg.freq_bins()]);
    }

    /// Windowed time-domain frame for one half spectrum, already scaled for
    /// overlap-add.
    pub fn synthesize_frame(&self, bins: &[Complex64], out: &mut [f64]) {
        let n = self.cfg.n_fft;
        let half = n / 2;
        debug_assert_eq!(bins.len(), half + 1);
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        buf[..=half].copy_from_slice(bins);
        for k in 1..half {
            buf[n - k] = bins[k].conj();
        }
        self.inv.process(&mut buf);
        let scale = 1.0 / n as f64;
        for ((o, b), &w) in out.iter_mut().zip(&buf).zip(&self.ws) {
            *o = b.re * scale * w;
        }
    }
}

/// Batch STFT.
pub fn stft(audio: &[f64], cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    let engine = StftEngine::new(*cfg)?;
    stft_with(&engine, audio)
}

pub fn stft_with(engine: &StftEngine, audio: &[f64]) -> Result<ComplexSpectrogram> {
    let cfg = *engine.config();
    if audio.len() < cfg.win_length {
        return Err(Error::input(format!(
            "audio of {} samples is shorter than one {}-sample window",
            audio.len(),
            cfg.win_length
        )));
    }
    if let Some(i) = audio.iter().position(|v| !v.is_finite()) {
        return Err(Error::input(format!("non-finite sample at index {i}")));
    }
    let left = cfg.left_pad();
    let right = match cfg.center_mode {
        CenterMode::Causal => 0,
        CenterMode::Centered => cfg.win_length / 2,
    };
    let mut padded = vec![0.0; left + audio.len() + right];
    padded[left..left + audio.len()].copy_from_slice(audio);

    let frames = cfg.frame_count(audio.len());
    let bins = cfg.freq_bins();
    let mut data = vec![Complex64::new(0.0, 0.0); frames * bins];
    for (t, out) in data.chunks_exact_mut(bins).enumerate() {
        let start = t * cfg.hop;
        engine.analyze_frame(&padded[start..start + cfg.win_length], out);
    }
    ComplexSpectrogram::new(frames, data, cfg, SpectralScale::Linear, audio.len())
}

/// Batch inverse STFT. Returns every sample that all overlapping frames
/// have contributed to, with the leading pad removed, truncated to the
/// analyzed signal length.
pub fn istft(spec: &ComplexSpectrogram) -> Result<Vec<f64>> {
    if spec.scale() != SpectralScale::Linear {
        return Err(Error::Scale {
            expected: "linear",
            found: spec.scale().name(),
        });
    }
    let engine = StftEngine::new(*spec.config())?;
    let mut synth = StreamingIstft::with_pad(engine, spec.config().left_pad());
    let mut out = Vec::with_capacity(spec.frames() * spec.config().hop);
    for t in 0..spec.frames() {
        synth.push_frame(spec.frame(t), &mut out);
    }
    out.truncate(spec.signal_len());
    Ok(out)
}

/// Incremental causal STFT: buffers partial hops, emits one frame per hop.
#[derive(Clone)]
pub struct StreamingStft {
    engine: StftEngine,
    window: Vec<f64>,
    filled: usize,
}

impl StreamingStft {
    pub fn new(engine: StftEngine) -> Result<Self> {
        if engine.config().center_mode != CenterMode::Causal {
            return Err(Error::config("streaming analysis requires causal framing"));
        }
        let win = engine.config().win_length;
        let hop = engine.config().hop;
        Ok(Self {
            window: vec![0.0; win],
            filled: win - hop,
            engine,
        })
    }

    pub fn reset(&mut self) {
        let cfg = *self.engine.config();
        self.window.iter_mut().for_each(|v| *v = 0.0);
        self.filled = cfg.win_length - cfg.hop;
    }

    /// Samples held back waiting for the current hop to complete.
    pub fn pending(&self) -> usize {
        let cfg = self.engine.config();
        self.filled - (cfg.win_length - cfg.hop)
    }

    /// Appends samples; returns the frames (each `freq_bins` long) completed.
    pub fn push(&mut self, samples: &[f64]) -> Vec<Vec<Complex64>> {
        let win = self.engine.config().win_length;
        let hop = self.engine.config().hop;
        let bins = self.engine.config().freq_bins();
        let mut frames = Vec::new();
        let mut rest = samples;
        while !rest.is_empty() {
            let take = (win - self.filled).min(rest.len());
            self.window[self.filled..self.filled + take].copy_from_slice(&rest[..take]);
            self.filled += take;
            rest = &rest[take..];
            if self.filled == win {
                let mut out = vec![Complex64::new(0.0, 0.0); bins];
                self.engine.analyze_frame(&self.window, &mut out);
                frames.push(out);
                self.window.copy_within(hop.., 0);
                self.filled = win - hop;
            }
        }
        frames
    }
}

/// Incremental overlap-add synthesis.
#[derive(Clone)]
pub struct StreamingIstft {
    engine: StftEngine,
    acc: Vec<f64>,
    frame: Vec<f64>,
    /// Leading output samples still to discard.
    skip: usize,
    pad: usize,
}

impl StreamingIstft {
    /// Synthesis aligned with causal analysis: the leading pad is dropped.
    pub fn new(engine: StftEngine) -> Self {
        let pad = engine.config().left_pad();
        Self::with_pad(engine, pad)
    }

    fn with_pad(engine: StftEngine, pad: usize) -> Self {
        let win = engine.config().win_length;
        Self {
            engine,
            acc: vec![0.0; win],
            frame: vec![0.0; win],
            skip: pad,
            pad,
        }
    }

    pub fn reset(&mut self) {
        self.acc.iter_mut().for_each(|v| *v = 0.0);
        self.skip = self.pad;
    }

    /// Adds one frame and appends the samples it completes to `out`.
    pub fn push_frame(&mut self, bins: &[Complex64], out: &mut Vec<f64>) {
        let hop = self.engine.config().hop;
        self.engine.synthesize_frame(bins, &mut self.frame);
        for (a, &f) in self.acc.iter_mut().zip(&self.frame) {
            *a += f;
        }
        let drop = self.skip.min(hop);
        self.skip -= drop;
        out.extend_from_slice(&self.acc[drop..hop]);
        self.acc.copy_within(hop.., 0);
        let n = self.acc.len();
        self.acc[n - hop..].iter_mut().for_each(|v| *v = 0.0);
    }
}
