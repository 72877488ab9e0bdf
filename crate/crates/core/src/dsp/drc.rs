//! Magnitude compression and expansion of complex spectra with the phase
//! factor carried through unchanged.

use rustfft::num_complex::Complex64;

use super::stft::{ComplexSpectrogram, SpectralScale};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompressionCoeff(f64);

impl CompressionCoeff {
    pub fn new(p: f64) -> Result<Self> {
        if !(p.is_finite() && p > 0.0) {
            return Err(Error::config(format!(
                "compression coefficient must be positive, got {p}"
            )));
        }
        Ok(Self(p))
    }

    pub fn p(self) -> f64 {
        self.0
    }
}

impl Default for CompressionCoeff {
    fn default() -> Self {
        Self(2.0)
    }
}

/// `m^exponent * (s / m)`, with `0 -> 0`.
#[inline]
pub fn warp_bin(s: Complex64, exponent: f64) -> Complex64 {
    let m = s.norm();
    if m == 0.0 {
        return Complex64::new(0.0, 0.0);
    }
    let phase = s / m;
    phase * m.powf(exponent)
}

pub fn compress_bins(bins: &mut [Complex64], c: CompressionCoeff) {
    let e = 1.0 / c.p();
    bins.iter_mut().for_each(|b| *b = warp_bin(*b, e));
}

pub fn expand_bins(bins: &mut [Complex64], c: CompressionCoeff) {
    let e = c.p();
    bins.iter_mut().for_each(|b| *b = warp_bin(*b, e));
}

pub fn drc(spec: &ComplexSpectrogram, c: CompressionCoeff) -> Result<ComplexSpectrogram> {
    if spec.scale() != SpectralScale::Linear {
        return Err(Error::Scale {
            expected: "linear",
            found: spec.scale().name(),
        });
    }
    let mut out = spec.clone();
    compress_bins(out.data_mut(), c);
    Ok(out.with_scale(SpectralScale::Compressed))
}

pub fn dre(spec: &ComplexSpectrogram, c: CompressionCoeff) -> Result<ComplexSpectrogram> {
    if spec.scale() != SpectralScale::Compressed {
        return Err(Error::Scale {
            expected: "compressed",
            found: spec.scale().name(),
        });
    }
    let mut out = spec.clone();
    expand_bins(out.data_mut(), c);
    Ok(out.with_scale(SpectralScale::Linear))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::StftConfig;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn spec_of(bins: Vec<Complex64>) -> ComplexSpectrogram {
        let cfg = StftConfig::default();
        let frames = bins.len() / cfg.freq_bins();
        ComplexSpectrogram::new(frames, bins, cfg, SpectralScale::Linear, 0).unwrap()
    }

    #[test]
    fn hand_values() {
        let p = CompressionCoeff::default();
        assert_eq!(warp_bin(c(4.0, 0.0), 1.0 / p.p()), c(2.0, 0.0));
        assert_eq!(warp_bin(c(-9.0, 0.0), 1.0 / p.p()), c(-3.0, 0.0));
        assert_eq!(warp_bin(c(0.0, 0.0), 0.5), c(0.0, 0.0));
        assert_eq!(warp_bin(c(2.0, 0.0), 2.0), c(4.0, 0.0));
    }

    #[test]
    fn rejects_non_positive_coefficient() {
        assert!(CompressionCoeff::new(0.0).is_err());
        assert!(CompressionCoeff::new(-1.0).is_err());
        assert!(CompressionCoeff::new(f64::NAN).is_err());
    }

    #[test]
    fn scale_tags_are_enforced() {
        let s = spec_of(vec![c(1.0, 1.0); 257]);
        let p = CompressionCoeff::default();
        assert!(dre(&s, p).is_err());
        let sc = drc(&s, p).unwrap();
        assert_eq!(sc.scale(), SpectralScale::Compressed);
        assert!(drc(&sc, p).is_err());
        assert!(crate::dsp::istft(&sc).is_err());
        assert_eq!(dre(&sc, p).unwrap().scale(), SpectralScale::Linear);
    }

    proptest! {
        #[test]
        fn round_trip_is_identity(
            vals in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3, 0u8..4), 257),
            p in 0.3f64..4.0,
        ) {
            let bins: Vec<_> = vals.iter()
                .map(|&(re, im, z)| if z == 0 { c(0.0, 0.0) } else { c(re, im) })
                .collect();
            let s = spec_of(bins);
            let p = CompressionCoeff::new(p).unwrap();
            let back = dre(&drc(&s, p).unwrap(), p).unwrap();
            for (a, b) in s.data().iter().zip(back.data()) {
                prop_assert!((a - b).norm() <= 1e-6 * a.norm().max(f64::MIN_POSITIVE));
            }
        }

        #[test]
        fn phase_preserved_and_monotone(re in -50.0f64..50.0, im in -50.0f64..50.0, k in 1.01f64..3.0) {
            let a = c(re, im);
            prop_assume!(a.norm() > 1e-9);
            let ca = warp_bin(a, 0.5);
            prop_assert!((ca.arg() - a.arg()).abs() < 1e-12);
            let b = a * k;
            prop_assert!(warp_bin(b, 0.5).norm() > ca.norm());
        }

        #[test]
        fn dynamic_range_shrinks(mags in prop::collection::vec(1e-4f64..1e4, 2..64), p in 1.0f64..4.0) {
            let range = |m: &[f64]| {
                let max = m.iter().cloned().fold(0.0, f64::max);
                let min = m.iter().cloned().fold(f64::INFINITY, f64::min);
                max / min
            };
            let compressed: Vec<f64> = mags.iter().map(|&m| warp_bin(c(m, 0.0), 1.0 / p).norm()).collect();
            prop_assert!(range(&compressed) <= range(&mags).powf(1.0 / p) * (1.0 + 1e-12));
        }
    }
}
