//! Multi-scale log-mel L1 distance with an analytic backward pass.
//!
//! Per scale: frames of `n_fft` samples every `n_fft / 4`, zero-padded by
//! `n_fft / 2` on both ends, periodic Hann window, power spectrum, HTK mel
//! triangles from 0 Hz to Nyquist, then `ln(mel + MEL_EPS)`. The distance is
//! the mean absolute log-mel difference per scale, averaged over scales.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::dsp::periodic_hann;
use crate::error::{Error, Result};
use crate::nn::{Real, Tensor, Var};

/// Floor added to mel energies before the logarithm.
pub const MEL_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MelScale {
    pub n_fft: usize,
    pub n_mels: usize,
}

impl MelScale {
    pub fn hop(&self) -> usize {
        self.n_fft / 4
    }
}

/// Window sizes with their band counts.
pub const DEFAULT_MEL_SCALES: [MelScale; 3] = [
    MelScale {
        n_fft: 512,
        n_mels: 64,
    },
    MelScale {
        n_fft: 1024,
        n_mels: 128,
    },
    MelScale {
        n_fft: 2048,
        n_mels: 128,
    },
];

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// One triangular band: weights for bins `start..start + w.len()`.
#[derive(Clone, Debug)]
struct Band {
    start: usize,
    w: Vec<f64>,
}

fn triangles(sample_rate: u32, n_fft: usize, n_mels: usize) -> Vec<Band> {
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / n_fft as f64;
    (0..n_mels)
        .map(|b| {
            let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
            let weights: Vec<(usize, f64)> = (0..=n_fft / 2)
                .filter_map(|k| {
                    let f = k as f64 * bin_hz;
                    let w = ((f - lo) / (mid - lo)).min((hi - f) / (hi - mid));
                    (w > 0.0).then_some((k, w))
                })
                .collect();
            match weights.first() {
                Some(&(start, _)) => Band {
                    start,
                    w: weights.iter().map(|&(_, w)| w).collect(),
                },
                None => Band {
                    start: 0,
                    w: Vec::new(),
                },
            }
        })
        .collect()
}

#[derive(Clone)]
struct Scale {
    spec: MelScale,
    window: Vec<f64>,
    bands: Vec<Band>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl Scale {
    fn frames(&self, len: usize) -> usize {
        len / self.spec.hop() + 1
    }

    /// Spectrum of frame `t` (bins `0..=n_fft/2`).
    fn spectrum(&self, x: &[f64], t: usize, buf: &mut [Complex64]) {
        let n = self.spec.n_fft;
        let start = (t * self.spec.hop()) as isize - (n / 2) as isize;
        for (m, b) in buf.iter_mut().enumerate() {
            let i = start + m as isize;
            let v = if i >= 0 && (i as usize) < x.len() {
                x[i as usize]
            } else {
                0.0
            };
            *b = Complex64::new(v * self.window[m], 0.0);
        }
        self.fwd.process(buf);
    }

    fn mel(&self, spec: &[Complex64], out: &mut [f64]) {
        for (o, band) in out.iter_mut().zip(&self.bands) {
            *o = band
                .w
                .iter()
                .zip(&spec[band.start..])
                .map(|(w, s)| w * s.norm_sqr())
                .sum();
        }
    }

    fn log_mel(&self, x: &[f64]) -> Vec<f64> {
        let nm = self.spec.n_mels;
        let frames = self.frames(x.len());
        let mut out = vec![0.0; frames * nm];
        let mut buf = vec![Complex64::new(0.0, 0.0); self.spec.n_fft];
        for t in 0..frames {
            self.spectrum(x, t, &mut buf);
            let row = &mut out[t * nm..(t + 1) * nm];
            self.mel(&buf, row);
            row.iter_mut().for_each(|v| *v = (*v + MEL_EPS).ln());
        }
        out
    }
}

/// Precomputed filterbanks and FFT plans for a set of scales.
#[derive(Clone)]
pub struct MelLoss {
    sample_rate: u32,
    scales: Vec<Scale>,
}

impl std::fmt::Debug for MelLoss {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelLoss")
            .field("sample_rate", &self.sample_rate)
            .field(
                "scales",
                &self.scales.iter().map(|s| s.spec).collect::<Vec<_>>(),
            )
            .finish()
    }
}

impl MelLoss {
    pub fn new(sample_rate: u32, scales: &[MelScale]) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::config("mel loss needs at least one scale"));
        }
        let mut planner = FftPlanner::new();
        let scales = scales
            .iter()
            .map(|&spec| {
                if spec.n_fft < 4 || spec.n_fft % 4 != 0 || spec.n_mels == 0 {
                    return Err(Error::config(format!(
                        "mel scale needs n_fft divisible by 4 and at least one band, got {spec:?}"
                    )));
                }
                Ok(Scale {
                    spec,
                    window: periodic_hann(spec.n_fft),
                    bands: triangles(sample_rate, spec.n_fft, spec.n_mels),
                    fwd: planner.plan_fft_forward(spec.n_fft),
                    inv: planner.plan_fft_inverse(spec.n_fft),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            sample_rate,
            scales,
        })
    }

    pub fn standard(sample_rate: u32) -> Result<Self> {
        Self::new(sample_rate, &DEFAULT_MEL_SCALES)
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    fn check(x: &[f64], x_hat_len: usize) -> Result<()> {
        if x.len() != x_hat_len {
            return Err(Error::input(format!(
                "mel loss needs equal lengths, got {} and {x_hat_len}",
                x.len()
            )));
        }
        if x.is_empty() {
            return Err(Error::input("mel loss of empty signals"));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("mel loss reference has non-finite samples"));
        }
        Ok(())
    }

    /// Loss between two plain signals.
    pub fn value(&self, x: &[f64], x_hat: &[f64]) -> Result<f64> {
        Self::check(x, x_hat.len())?;
        let mut total = 0.0;
        for sc in &self.scales {
            let a = sc.log_mel(x);
            let b = sc.log_mel(x_hat);
            total += a.iter().zip(&b).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.len() as f64;
        }
        Ok(total / self.scales.len() as f64)
    }

    /// Differentiable loss of `x_hat` (a 1-D tape value) against the fixed
    /// reference `x`.
    pub fn loss<'t, T: Real>(&self, x: &[f64], x_hat: Var<'t, T>) -> Result<Var<'t, T>> {
        let val = x_hat.value();
        if val.ndim() != 1 {
            return Err(Error::shape(format!(
                "mel loss expects a 1-D signal, got {:?}",
                val.shape()
            )));
        }
        Self::check(x, val.len())?;
        let xh: Vec<f64> = val.data().iter().map(|&v| v.to_f64()).collect();
        let len = xh.len();

        // Keep per scale the spectra of x_hat and dL/dmel.
        let mut saved: Vec<(Vec<Complex64>, Vec<f64>)> = Vec::with_capacity(self.scales.len());
        let mut total = 0.0;
        let ns = self.scales.len() as f64;
        for sc in &self.scales {
            let (n_fft, nm) = (sc.spec.n_fft, sc.spec.n_mels);
            let bins = n_fft / 2 + 1;
            let frames = sc.frames(len);
            let target = sc.log_mel(x);
            let count = (frames * nm) as f64;
            let mut spectra = vec![Complex64::new(0.0, 0.0); frames * bins];
            let mut dmel = vec![0.0; frames * nm];
            let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
            let mut mel = vec![0.0; nm];
            let mut sum = 0.0;
            for t in 0..frames {
                sc.spectrum(&xh, t, &mut buf);
                sc.mel(&buf, &mut mel);
                for b in 0..nm {
                    let d = (mel[b] + MEL_EPS).ln() - target[t * nm + b];
                    sum += d.abs();
                    let sign = if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    dmel[t * nm + b] = sign / (count * ns * (mel[b] + MEL_EPS));
                }
                spectra[t * bins..(t + 1) * bins].copy_from_slice(&buf[..bins]);
            }
            total += sum / count;
            saved.push((spectra, dmel));
        }
        let loss = total / ns;
        let scales = self.scales.clone();

        Ok(x_hat.tape().op(
            Tensor::scalar(T::lit(loss)),
            &[x_hat],
            Box::new(move |g, _| {
                let up = g.item().to_f64();
                let mut gx = vec![0.0f64; len];
                for (sc, (spectra, dmel)) in scales.iter().zip(&saved) {
                    let (n_fft, nm, hop) = (sc.spec.n_fft, sc.spec.n_mels, sc.spec.hop());
                    let bins = n_fft / 2 + 1;
                    let mut dpow = vec![0.0; bins];
                    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
                    for t in 0..spectra.len() / bins {
                        dpow.iter_mut().for_each(|v| *v = 0.0);
                        for (b, band) in sc.bands.iter().enumerate() {
                            let c = dmel[t * nm + b];
                            for (j, w) in band.w.iter().enumerate() {
                                dpow[band.start + j] += w * c;
                            }
                        }
                        buf.iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
                        for k in 0..bins {
                            buf[k] = spectra[t * bins + k] * (2.0 * dpow[k]);
                        }
                        // Adjoint of the windowed real DFT restricted to
                        // the half spectrum.
                        sc.inv.process(&mut buf);
                        let start = (t * hop) as isize - (n_fft / 2) as isize;
                        for m in 0..n_fft {
                            let i = start + m as isize;
                            if i >= 0 && (i as usize) < len {
                                gx[i as usize] += up * sc.window[m] * buf[m].re;
                            }
                        }
                    }
                }
                vec![Some(Tensor::from_vec(gx.into_iter().map(T::lit).collect()))]
            }),
        ))
    }
}
