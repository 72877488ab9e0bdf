//! Differentiable path from a compressed decoder output back to audio:
//! magnitude expansion of each complex bin, then overlap-add synthesis.
//! Both ops compute in f64 whatever the tape precision.

use rustfft::num_complex::Complex64;

use crate::dsp::{CompressionCoeff, StftConfig, StftEngine};
use crate::error::{Error, Result};
use crate::nn::{Real, Tensor, Var};

fn check_planes<T: Real>(v: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    if v.ndim() != 3 || v.dim(0) != 2 {
        return Err(Error::shape(format!(
            "{what} expects [2, T, F], got {:?}",
            v.shape()
        )));
    }
    Ok((v.dim(1), v.dim(2)))
}

/// `s_c |s_c|^(p-1)` on every (re, im) pair of a `[2, T, F]` tensor.
pub fn expand<'t, T: Real>(y: Var<'t, T>, c: CompressionCoeff) -> Result<Var<'t, T>> {
    let val = y.value();
    let (t, f) = check_planes(&val, "expansion")?;
    let n = t * f;
    let e = c.p() - 1.0;
    let d = val.data();
    let mut out = vec![T::zero(); 2 * n];
    for i in 0..n {
        let (a, b) = (d[i].to_f64(), d[n + i].to_f64());
        let r = a.hypot(b);
        let m = if r == 0.0 { 0.0 } else { r.powf(e) };
        out[i] = T::lit(a * m);
        out[n + i] = T::lit(b * m);
    }
    let src = val.clone();
    let shape = val.shape().to_vec();
    Ok(y.tape().op(
        Tensor::new(&shape, out)?,
        &[y],
        Box::new(move |g, _| {
            let d = src.data();
            let gd = g.data();
            let mut gi = vec![T::zero(); 2 * n];
            for i in 0..n {
                let (a, b) = (d[i].to_f64(), d[n + i].to_f64());
                let r = a.hypot(b);
                if r == 0.0 {
                    // The map is flat at the origin for p > 1; for p = 1 it is
                    // the identity.
                    if e == 0.0 {
                        gi[i] = gd[i];
                        gi[n + i] = gd[n + i];
                    }
                    continue;
                }
                // J = m I + e r^(p-3) [a b]^T [a b]
                let m = r.powf(e);
                let k = e * r.powf(e - 2.0);
                let (ga, gb) = (gd[i].to_f64(), gd[n + i].to_f64());
                let dot = k * (a * ga + b * gb);
                gi[i] = T::lit(m * ga + dot * a);
                gi[n + i] = T::lit(m * gb + dot * b);
            }
            vec![Some(Tensor::new(&shape, gi).expect("shape"))]
        }),
    ))
}

/// Overlap-add synthesis of a `[2, T, F]` linear spectrum (bins at and
/// above `F` taken as zero), matching the batch inverse STFT sample for
/// sample: the leading pad is dropped and `T * hop - pad` samples are
/// returned.
pub fn synthesize<'t, T: Real>(s: Var<'t, T>, cfg: &StftConfig) -> Result<Var<'t, T>> {
    let val = s.value();
    let (frames, f) = check_planes(&val, "synthesis")?;
    let bins = cfg.freq_bins();
    if f > bins {
        return Err(Error::shape(format!(
            "{f} bins exceed the {bins} of the transform"
        )));
    }
    let engine = StftEngine::new(*cfg)?;
    let (hop, win, n_fft, pad) = (cfg.hop, cfg.win_length, cfg.n_fft, cfg.left_pad());
    let out_len = (frames * hop).saturating_sub(pad);
    let n = frames * f;
    let d = val.data();
    let mut acc = vec![0.0f64; frames * hop + win];
    let mut spec = vec![Complex64::new(0.0, 0.0); bins];
    let mut frame = vec![0.0; win];
    for t in 0..frames {
        for k in 0..f {
            spec[k] = Complex64::new(d[t * f + k].to_f64(), d[n + t * f + k].to_f64());
        }
        engine.synthesize_frame(&spec, &mut frame);
        for (a, &v) in acc[t * hop..t * hop + win].iter_mut().zip(&frame) {
            *a += v;
        }
    }
    let out: Vec<T> = acc[pad..pad + out_len].iter().map(|&v| T::lit(v)).collect();
    let shape = val.shape().to_vec();

    Ok(s.tape().op(
        Tensor::from_vec(out),
        &[s],
        Box::new(move |g, _| {
            let gd = g.data();
            let ws = engine.synthesis();
            let scale = 1.0 / n_fft as f64;
            let mut gi = vec![T::zero(); 2 * n];
            let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
            for t in 0..frames {
                buf.iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
                for m in 0..win {
                    let idx = (t * hop + m) as isize - pad as isize;
                    if idx >= 0 && (idx as usize) < out_len {
                        buf[m].re = gd[idx as usize].to_f64() * ws[m] * scale;
                    }
                }
                engine.fft_forward().process(&mut buf);
                for k in 0..f {
                    let c = if k == 0 || 2 * k == n_fft { 1.0 } else { 2.0 };
                    gi[t * f + k] = T::lit(c * buf[k].re);
                    gi[n + t * f + k] = T::lit(c * buf[k].im);
                }
            }
            vec![Some(Tensor::new(&shape, gi).expect("shape"))]
        }),
    ))
}
