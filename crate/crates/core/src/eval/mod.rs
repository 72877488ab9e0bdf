//! Objective metrics for codec output: SDR, multi-scale log-mel distance
//! and codebook utilization, per clip and aggregated over a set of clips.
//!
//! The mel distance here is written separately from the training loss so
//! each can check the other.

use std::f64::consts::TAU;
use std::io::Write;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::codec::Codec;
use crate::error::{Error, Result};
use crate::losses::{hz_to_mel, mel_to_hz, MelScale, DEFAULT_MEL_SCALES, MEL_EPS};
use crate::quantizer::utilization;

/// SDR reported for a residual of exactly zero, and the ceiling otherwise.
pub const SDR_CLAMP_DB: f64 = 100.0;

fn check_pair(x: &[f64], x_hat: &[f64], what: &str) -> Result<()> {
    if x.len() != x_hat.len() {
        return Err(Error::input(format!(
            "{what} needs equal lengths, got {} and {}",
            x.len(),
            x_hat.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::input(format!("{what} of empty signals")));
    }
    if x.iter().chain(x_hat).any(|v| !v.is_finite()) {
        return Err(Error::input(format!("{what} input has non-finite samples")));
    }
    Ok(())
}

/// `10 log10(|x|^2 / |x - x_hat|^2)` in dB, at most [`SDR_CLAMP_DB`].
pub fn sdr(x: &[f64], x_hat: &[f64]) -> Result<f64> {
    check_pair(x, x_hat, "SDR")?;
    let signal: f64 = x.iter().map(|v| v * v).sum();
    if signal == 0.0 {
        return Err(Error::input("SDR reference is all zeros"));
    }
    let residual: f64 = x.iter().zip(x_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    if residual == 0.0 {
        return Ok(SDR_CLAMP_DB);
    }
    Ok((10.0 * (signal / residual).log10()).min(SDR_CLAMP_DB))
}

/// Dense `[n_mels, n_fft / 2 + 1]` HTK filterbank.
fn filterbank(sample_rate: u32, n_fft: usize, n_mels: usize) -> Vec<Vec<f64>> {
    let nyquist_mel = hz_to_mel(sample_rate as f64 / 2.0);
    let step = nyquist_mel / (n_mels + 1) as f64;
    let bins = n_fft / 2 + 1;
    (0..n_mels)
        .map(|b| {
            let lo = mel_to_hz(step * b as f64);
            let centre = mel_to_hz(step * (b + 1) as f64);
            let hi = mel_to_hz(step * (b + 2) as f64);
            (0..bins)
                .map(|k| {
                    let f = sample_rate as f64 * k as f64 / n_fft as f64;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= centre {
                        (f - lo) / (centre - lo)
                    } else {
                        (hi - f) / (hi - centre)
                    }
                })
                .collect()
        })
        .collect()
}

/// `[frames][n_mels]` log-mel energies of `x`, centred frames.
fn log_mel(
    x: &[f64],
    sample_rate: u32,
    scale: MelScale,
    planner: &mut FftPlanner<f64>,
) -> Vec<Vec<f64>> {
    let n = scale.n_fft;
    let hop = n / 4;
    let fft = planner.plan_fft_forward(n);
    let window: Vec<f64> = (0..n)
        .map(|m| 0.5 - 0.5 * (TAU * m as f64 / n as f64).cos())
        .collect();
    let fb = filterbank(sample_rate, n, scale.n_mels);
    let mut padded = vec![0.0; n / 2];
    padded.extend_from_slice(x);
    padded.resize(padded.len() + n / 2, 0.0);
    let frames = x.len() / hop + 1;
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    (0..frames)
        .map(|t| {
            let seg = &padded[t * hop..t * hop + n];
            for ((b, &s), &w) in buf.iter_mut().zip(seg).zip(&window) {
                *b = Complex64::new(s * w, 0.0);
            }
            fft.process(&mut buf);
            let power: Vec<f64> = buf[..=n / 2]
                .iter()
                .map(|c| c.re * c.re + c.im * c.im)
                .collect();
            fb.iter()
                .map(|row| (row.iter().zip(&power).map(|(w, p)| w * p).sum::<f64>() + MEL_EPS).ln())
                .collect()
        })
        .collect()
}

/// Mean absolute log-mel difference over the given scales.
pub fn mel_loss_with(
    x: &[f64],
    x_hat: &[f64],
    sample_rate: u32,
    scales: &[MelScale],
) -> Result<f64> {
    check_pair(x, x_hat, "mel loss")?;
    if scales.is_empty() {
        return Err(Error::config("mel loss needs at least one scale"));
    }
    let mut planner = FftPlanner::new();
    let mut total = 0.0;
    for &sc in scales {
        if sc.n_fft < 4 || sc.n_fft % 4 != 0 || sc.n_mels == 0 {
            return Err(Error::config(format!("unusable mel scale {sc:?}")));
        }
        let a = log_mel(x, sample_rate, sc, &mut planner);
        let b = log_mel(x_hat, sample_rate, sc, &mut planner);
        let cells = (a.len() * sc.n_mels) as f64;
        let sum: f64 = a
            .iter()
            .zip(&b)
            .flat_map(|(ra, rb)| ra.iter().zip(rb).map(|(p, q)| (p - q).abs()))
            .sum();
        total += sum / cells;
    }
    Ok(total / scales.len() as f64)
}

/// Mel distance at the three standard scales.
pub fn mel_loss(x: &[f64], x_hat: &[f64], sample_rate: u32) -> Result<f64> {
    mel_loss_with(x, x_hat, sample_rate, &DEFAULT_MEL_SCALES)
}

/// Metrics of one clip passed through the codec.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub file: String,
    pub duration_s: f64,
    pub sdr_db: f64,
    pub mel_loss: f64,
    /// Fraction of entries emitted per stage.
    pub utilization: Vec<f64>,
}

impl MetricReport {
    pub fn utilization_mean(&self) -> f64 {
        if self.utilization.is_empty() {
            0.0
        } else {
            self.utilization.iter().sum::<f64>() / self.utilization.len() as f64
        }
    }

    /// Compares a reference with a reconstruction that is already aligned.
    pub fn compare(
        file: &str,
        x: &[f64],
        x_hat: &[f64],
        sample_rate: u32,
        utilization: Vec<f64>,
    ) -> Result<Self> {
        Ok(Self {
            file: file.to_string(),
            duration_s: x.len() as f64 / sample_rate as f64,
            sdr_db: sdr(x, x_hat)?,
            mel_loss: mel_loss(x, x_hat, sample_rate)?,
            utilization,
        })
    }
}

/// Encodes and decodes `audio` with `n_stages` and compares it with the
/// input over the span the decoder reproduces. Batch decoding is already
/// sample-aligned with the input, so no latency shift is applied.
pub fn evaluate_clip(
    codec: &Codec,
    file: &str,
    audio: &[f64],
    n_stages: usize,
) -> Result<MetricReport> {
    let codes = codec.encode(audio, n_stages)?;
    if codes.frames() == 0 {
        return Err(Error::input(format!(
            "{file}: {} samples is shorter than one {}-sample frame",
            audio.len(),
            codec.config().samples_per_frame()
        )));
    }
    let y = codec.decode(&codes)?;
    let n = y.len().min(audio.len());
    let used = utilization(&codes, codec.rvq.codebook_size()).per_stage;
    MetricReport::compare(file, &audio[..n], &y[..n], codec.sample_rate(), used)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub const REPORT_HEADER: &str = "file,seconds,sdr_db,mel_loss,utilization_mean";

/// Per-file rows in filename order plus their aggregate.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    rows: Vec<MetricReport>,
}

impl Report {
    pub fn new(mut rows: Vec<MetricReport>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::input("no clips to report on"));
        }
        rows.sort_by(|a, b| a.file.cmp(&b.file));
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[MetricReport] {
        &self.rows
    }

    /// Duration-weighted means; the name is `mean`, per-stage utilization
    /// is averaged the same way.
    pub fn aggregate(&self) -> MetricReport {
        let total: f64 = self.rows.iter().map(|r| r.duration_s).sum();
        let weight = |r: &MetricReport| {
            if total > 0.0 {
                r.duration_s / total
            } else {
                1.0 / self.rows.len() as f64
            }
        };
        let stages = self
            .rows
            .iter()
            .map(|r| r.utilization.len())
            .max()
            .unwrap_or(0);
        let mut utilization = vec![0.0; stages];
        for r in &self.rows {
            for (u, v) in utilization.iter_mut().zip(&r.utilization) {
                *u += weight(r) * v;
            }
        }
        MetricReport {
            file: "mean".to_string(),
            duration_s: total,
            sdr_db: self.rows.iter().map(|r| weight(r) * r.sdr_db).sum(),
            mel_loss: self.rows.iter().map(|r| weight(r) * r.mel_loss).sum(),
            utilization,
        }
    }

    /// Header, one row per file, then the aggregate row.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "{REPORT_HEADER}")?;
        for r in self.rows.iter().chain(std::iter::once(&self.aggregate())) {
            writeln!(
                w,
                "{},{:.3},{:.3},{:.6},{:.6}",
                csv_field(&r.file),
                r.duration_s,
                r.sdr_db,
                r.mel_loss,
                r.utilization_mean()
            )?;
        }
        Ok(())
    }
}
