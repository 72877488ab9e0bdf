//! 16-bit mono PCM only; anything else is rejected rather than converted.

use std::path::Path;

use anyhow::{bail, Context, Result};
use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

pub fn read(path: &Path, sample_rate: u32) -> Result<Vec<f64>> {
    let mut r = WavReader::open(path).with_context(|| format!("cannot read {}", path.display()))?;
    let spec = r.spec();
    if spec.channels != 1 {
        bail!(
            "{}: {} channels, only mono is supported",
            path.display(),
            spec.channels
        );
    }
    if spec.sample_format != SampleFormat::Int || spec.bits_per_sample != 16 {
        bail!(
            "{}: {}-bit {:?} samples, only 16-bit integer PCM is supported",
            path.display(),
            spec.bits_per_sample,
            spec.sample_format
        );
    }
    if spec.sample_rate != sample_rate {
        bail!(
            "{}: sample rate {} Hz, the model needs {sample_rate} Hz (no resampling is done)",
            path.display(),
            spec.sample_rate
        );
    }
    r.samples::<i16>()
        .map(|s| Ok(s? as f64 / 32768.0))
        .collect::<Result<_, hound::Error>>()
        .with_context(|| format!("{}: malformed sample data", path.display()))
}

/// Rounds to 16 bits, saturating outside [-1, 1).
pub fn encode(samples: &[f64], sample_rate: u32) -> Result<Vec<u8>> {
    let spec = WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut buf = std::io::Cursor::new(Vec::new());
    let mut w = WavWriter::new(&mut buf, spec)?;
    for &s in samples {
        w.write_sample((s * 32768.0).round().clamp(-32768.0, 32767.0) as i16)?;
    }
    w.finalize()?;
    Ok(buf.into_inner())
}
