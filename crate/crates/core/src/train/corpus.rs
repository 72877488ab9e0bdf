use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// In-memory training audio at one sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    clips: Vec<Vec<f64>>,
    sample_rate: u32,
}

impl Corpus {
    pub fn new(clips: Vec<Vec<f64>>, sample_rate: u32) -> Result<Self> {
        if clips.iter().all(|c| c.is_empty()) {
            return Err(Error::input("corpus holds no audio"));
        }
        if let Some(i) = clips.iter().position(|c| c.iter().any(|v| !v.is_finite())) {
            return Err(Error::input(format!("clip {i} has non-finite samples")));
        }
        Ok(Self { clips, sample_rate })
    }

    pub fn clips(&self) -> &[Vec<f64>] {
        &self.clips
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn total_samples(&self) -> usize {
        self.clips.iter().map(Vec::len).sum()
    }

    pub fn seconds(&self) -> f64 {
        self.total_samples() as f64 / self.sample_rate as f64
    }

    /// A uniformly placed crop of `len` samples. Every valid start position
    /// across all clips is equally likely.
    pub fn sample<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Result<&[f64]> {
        let starts: Vec<usize> = self
            .clips
            .iter()
            .map(|c| (c.len() + 1).saturating_sub(len))
            .collect();
        let total: usize = starts.iter().sum();
        if len == 0 || total == 0 {
            return Err(Error::input(format!(
                "no clip is at least {len} samples long"
            )));
        }
        let mut k = rng.random_range(0..total);
        for (clip, &n) in self.clips.iter().zip(&starts) {
            if k < n {
                return Ok(&clip[k..k + len]);
            }
            k -= n;
        }
        unreachable!("k < total")
    }
}

/// Three or four harmonic tones, each partial with its own slow tremolo,
/// peak well below full scale.
pub fn multitone_clip(seconds: f64, sample_rate: u32, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = sample_rate as f64;
    let n = (seconds * sr).round() as usize;
    let n_tones = rng.random_range(3..=4);
    let mut partials = Vec::new();
    for _ in 0..n_tones {
        let f0: f64 = rng.random_range(110.0..880.0);
        let amp: f64 = rng.random_range(0.06..0.15);
        for h in 1..=3 {
            let f = f0 * h as f64;
            if f < 0.45 * sr {
                let rate: f64 = rng.random_range(0.1..0.8);
                partials.push((
                    f,
                    amp / h as f64,
                    rng.random_range(0.0..TAU),
                    rate,
                    rng.random_range(0.0..TAU),
                ));
            }
        }
    }
    (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            partials
                .iter()
                .map(|&(f, a, ph, rate, ep)| {
                    let env = 0.6 + 0.4 * (TAU * rate * t + ep).sin();
                    a * env * (TAU * f * t + ph).sin()
                })
                .sum()
        })
        .collect()
}

/// One clip of multi-tone audio: a fixed tone set whose partial levels
/// drift independently.
pub fn synthetic_multitone(seconds: f64, sample_rate: u32, seed: u64) -> Result<Corpus> {
    Corpus::new(
        vec![multitone_clip(seconds, sample_rate, seed)],
        sample_rate,
    )
}
