//! Strided and transposed 2-D convolution over `[C, T, F]` feature maps.
//!
//! Time is causal: a strided conv left-pads `k_t - s_t` zero frames so output
//! frame `i` sees input frames `s_t*i + s_t - k_t ..= s_t*i + s_t - 1`; a
//! transposed conv writes input frame `i` to output frames
//! `s_t*i .. s_t*i + k_t` and drops whatever spills past `s_t * T`.
//! Frequency uses explicit zero padding `(lo, hi)` and must divide exactly.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::geom::Geom;
use super::{join, Params};
use crate::error::{Error, Result};
use crate::nn::tensor::{dims3, matmul_acc, matmul_nt_acc, matmul_tn_acc};
use crate::nn::{Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    /// `(k_t, k_f)`
    pub kernel: (usize, usize),
    /// `(s_t, s_f)`
    pub stride: (usize, usize),
    pub transposed: bool,
    pub causal_time: bool,
    /// Zero columns on the low and high frequency side.
    pub freq_pad: (usize, usize),
}

impl Conv2dSpec {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
    ) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            transposed: false,
            causal_time: true,
            freq_pad: (0, 0),
        }
    }

    pub fn transposed(mut self) -> Self {
        self.transposed = true;
        self
    }

    pub fn with_freq_pad(mut self, lo: usize, hi: usize) -> Self {
        self.freq_pad = (lo, hi);
        self
    }

    pub fn non_causal(mut self) -> Self {
        self.causal_time = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (kt, kf) = self.kernel;
        let (st, sf) = self.stride;
        if self.in_ch == 0 || self.out_ch == 0 || kt == 0 || kf == 0 || st == 0 || sf == 0 {
            return Err(Error::config(format!("degenerate conv spec {self:?}")));
        }
        if self.causal_time && kt < st {
            return Err(Error::config(format!(
                "causal conv needs k_t >= s_t, got k_t={kt} s_t={st}"
            )));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        let (kt, kf) = self.kernel;
        if self.transposed {
            [self.in_ch, self.out_ch, kt, kf]
        } else {
            [self.out_ch, self.in_ch, kt, kf]
        }
    }

    pub fn param_count(&self) -> usize {
        self.in_ch * self.out_ch * self.kernel.0 * self.kernel.1 + self.out_ch
    }

    /// Left time padding of a strided conv.
    pub fn time_pad(&self) -> usize {
        if self.causal_time && !self.transposed {
            self.kernel.0 - self.stride.0
        } else {
            0
        }
    }

    pub fn out_freq(&self, f: usize) -> Result<usize> {
        let (kf, sf) = (self.kernel.1, self.stride.1);
        let (lo, hi) = self.freq_pad;
        if self.transposed {
            let full = sf * f.saturating_sub(1) + kf;
            if f == 0 || full <= lo + hi {
                return Err(Error::shape(format!(
                    "transposed conv on {f} bins leaves nothing"
                )));
            }
            Ok(full - lo - hi)
        } else {
            let padded = f + lo + hi;
            if padded < kf || (padded - kf) % sf != 0 {
                return Err(Error::shape(format!(
                    "{f} bins (+{lo}/{hi} pad) do not fit kernel {kf} stride {sf} exactly"
                )));
            }
            Ok((padded - kf) / sf + 1)
        }
    }

    pub fn out_frames(&self, t: usize) -> usize {
        let (kt, st) = (self.kernel.0, self.stride.0);
        match (self.transposed, self.causal_time) {
            (false, _) => {
                let padded = t + self.time_pad();
                if padded < kt {
                    0
                } else {
                    (padded - kt) / st + 1
                }
            }
            (true, true) => st * t,
            (true, false) if t == 0 => 0,
            (true, false) => st * (t - 1) + kt,
        }
    }

    /// Multiply-accumulates for one input of `t x f` frames and bins.
    pub fn macs(&self, t: usize, f: usize) -> Result<usize> {
        let taps = self.in_ch * self.out_ch * self.kernel.0 * self.kernel.1;
        if self.transposed {
            // Every input cell is multiplied into every kernel tap.
            Ok(taps * t * f)
        } else {
            Ok(taps * self.out_frames(t) * self.out_freq(f)?)
        }
    }

    fn conv_geom(&self, t_in: usize, f_in: usize, t_pad: usize) -> Result<(Geom, usize, usize)> {
        let f_out = self.out_freq(f_in)?;
        let padded = t_in + t_pad;
        let t_out = if padded < self.kernel.0 {
            0
        } else {
            (padded - self.kernel.0) / self.stride.0 + 1
        };
        let g = Geom {
            ch: self.in_ch,
            grid_t: t_in,
            grid_f: f_in,
            kt: self.kernel.0,
            kf: self.kernel.1,
            st: self.stride.0,
            sf: self.stride.1,
            t_off: t_pad,
            f_off: self.freq_pad.0,
            col_t: t_out,
            col_f: f_out,
        };
        Ok((g, t_out, f_out))
    }

    fn tconv_geom(
        &self,
        t_in: usize,
        f_in: usize,
        t_off: usize,
        t_out: usize,
    ) -> Result<(Geom, usize)> {
        let f_out = self.out_freq(f_in)?;
        let g = Geom {
            ch: self.out_ch,
            grid_t: t_out,
            grid_f: f_out,
            kt: self.kernel.0,
            kf: self.kernel.1,
            st: self.stride.0,
            sf: self.stride.1,
            t_off,
            f_off: self.freq_pad.0,
            col_t: t_in,
            col_f: f_in,
        };
        Ok((g, f_out))
    }
}

fn check_input<T: Real>(spec: &Conv2dSpec, x: &Tensor<T>) -> Result<(usize, usize)> {
    if x.ndim() != 3 || x.dim(0) != spec.in_ch {
        return Err(Error::shape(format!(
            "conv expects [{}, T, F], got {:?}",
            spec.in_ch,
            x.shape()
        )));
    }
    Ok((x.dim(1), x.dim(2)))
}

fn bias_grid<T: Real>(b: &[T], t: usize, f: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(b.len() * t * f);
    for &v in b {
        out.extend(std::iter::repeat(v).take(t * f));
    }
    out
}

fn channel_sums<T: Real>(g: &[T], ch: usize) -> Vec<T> {
    let n = g.len() / ch.max(1);
    (0..ch)
        .map(|c| {
            g[c * n..(c + 1) * n]
                .iter()
                .copied()
                .fold(T::zero(), |a, b| a + b)
        })
        .collect()
}

/// Strided conv with `t_pad` leading zero frames. Returns the output and the
/// gathered columns.
pub(crate) fn conv2d_raw<T: Real>(
    spec: &Conv2dSpec,
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    t_pad: usize,
) -> Result<(Tensor<T>, Vec<T>, Geom)> {
    let (t_in, f_in) = check_input(spec, x)?;
    let (g, t_out, f_out) = spec.conv_geom(t_in, f_in, t_pad)?;
    let cols = g.im2col(x.data());
    let mut out = bias_grid(b.data(), t_out, f_out);
    matmul_acc(w.data(), &cols, &mut out, spec.out_ch, g.rows(), g.cols());
    Ok((Tensor::new(&[spec.out_ch, t_out, f_out], out)?, cols, g))
}

/// Transposed conv producing output frames `[t_off, t_off + t_out)` of the
/// uncropped result.
pub(crate) fn conv_transpose2d_raw<T: Real>(
    spec: &Conv2dSpec,
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    t_off: usize,
    t_out: usize,
) -> Result<(Tensor<T>, Geom)> {
    let (t_in, f_in) = check_input(spec, x)?;
    let (g, f_out) = spec.tconv_geom(t_in, f_in, t_off, t_out)?;
    let mut ycol = vec![T::zero(); g.rows() * g.cols()];
    matmul_tn_acc(
        w.data(),
        x.data(),
        &mut ycol,
        spec.in_ch,
        g.rows(),
        g.cols(),
    );
    let mut out = bias_grid(b.data(), t_out, f_out);
    g.col2im(&ycol, &mut out);
    Ok((Tensor::new(&[spec.out_ch, t_out, f_out], out)?, g))
}

/// Differentiable strided conv.
pub fn conv2d<'t, T: Real>(
    spec: &Conv2dSpec,
    x: Var<'t, T>,
    w: Var<'t, T>,
    b: Var<'t, T>,
    t_pad: usize,
) -> Result<Var<'t, T>> {
    let (xv, wv) = (x.value(), w.value());
    check_weights(spec, &wv, &b.value())?;
    let (out, cols, g) = conv2d_raw(spec, &xv, &wv, &b.value(), t_pad)?;
    let spec = *spec;
    let x_shape = xv.shape().to_vec();
    let cols = Rc::new(cols);
    Ok(x.tape().op(
        out,
        &[x, w, b],
        Box::new(move |gy, needs| {
            let (k, n) = (g.rows(), g.cols());
            let gx = needs[0].then(|| {
                let mut dcols = vec![T::zero(); k * n];
                matmul_tn_acc(wv.data(), gy.data(), &mut dcols, spec.out_ch, k, n);
                let mut dx = vec![T::zero(); x_shape.iter().product()];
                g.col2im(&dcols, &mut dx);
                Tensor::new(&x_shape, dx).unwrap()
            });
            let gw = needs[1].then(|| {
                let mut dw = vec![T::zero(); spec.out_ch * k];
                matmul_nt_acc(gy.data(), &cols, &mut dw, spec.out_ch, n, k);
                Tensor::new(wv.shape(), dw).unwrap()
            });
            let gb = needs[2].then(|| Tensor::from_vec(channel_sums(gy.data(), spec.out_ch)));
            vec![gx, gw, gb]
        }),
    ))
}

/// Differentiable transposed conv.
pub fn conv_transpose2d<'t, T: Real>(
    spec: &Conv2dSpec,
    x: Var<'t, T>,
    w: Var<'t, T>,
    b: Var<'t, T>,
    t_off: usize,
    t_out: usize,
) -> Result<Var<'t, T>> {
    let (xv, wv) = (x.value(), w.value());
    check_weights(spec, &wv, &b.value())?;
    let (out, g) = conv_transpose2d_raw(spec, &xv, &wv, &b.value(), t_off, t_out)?;
    let spec = *spec;
    Ok(x.tape().op(
        out,
        &[x, w, b],
        Box::new(move |gy, needs| {
            let (k, n) = (g.rows(), g.cols());
            let dycol = g.im2col(gy.data());
            let gx = needs[0].then(|| {
                let mut dx = vec![T::zero(); spec.in_ch * n];
                matmul_acc(wv.data(), &dycol, &mut dx, spec.in_ch, k, n);
                Tensor::new(xv.shape(), dx).unwrap()
            });
            let gw = needs[1].then(|| {
                let mut dw = vec![T::zero(); spec.in_ch * k];
                matmul_nt_acc(xv.data(), &dycol, &mut dw, spec.in_ch, n, k);
                Tensor::new(wv.shape(), dw).unwrap()
            });
            let gb = needs[2].then(|| Tensor::from_vec(channel_sums(gy.data(), spec.out_ch)));
            vec![gx, gw, gb]
        }),
    ))
}

fn check_weights<T: Real>(spec: &Conv2dSpec, w: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if w.shape() != spec.weight_shape() || b.shape() != [spec.out_ch] {
        return Err(Error::shape(format!(
            "conv weights {:?}/{:?} do not match spec {:?}",
            w.shape(),
            b.shape(),
            spec.weight_shape()
        )));
    }
    Ok(())
}

/// A convolution layer with its weights.
#[derive(Clone, Debug)]
pub struct Conv2d<T: Real> {
    pub spec: Conv2dSpec,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Causal history of one convolution in a stream.
#[derive(Clone, Debug)]
pub struct ConvStream<T: Real> {
    /// Strided: frames not yet consumed. Transposed: the last input frames.
    buf: Tensor<T>,
}

impl<T: Real> ConvStream<T> {
    pub fn frames(&self) -> usize {
        self.buf.dim(1)
    }

    /// Stored values.
    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }
}

impl<T: Real> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(spec: Conv2dSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let (kt, kf) = spec.kernel;
        let fan_in = if spec.transposed {
            (spec.in_ch * kt * kf / (spec.stride.0 * spec.stride.1)).max(1)
        } else {
            spec.in_ch * kt * kf
        };
        let bound = 1.0 / (fan_in as f64).sqrt();
        Ok(Self {
            spec,
            weight: Tensor::uniform(&spec.weight_shape(), -bound, bound, rng),
            bias: Tensor::uniform(&[spec.out_ch], -bound, bound, rng),
        })
    }

    pub fn zeros(spec: Conv2dSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            weight: Tensor::zeros(&spec.weight_shape()),
            bias: Tensor::zeros(&[spec.out_ch]),
        })
    }

    fn batch_crop(&self, t_in: usize) -> (usize, usize) {
        (0, self.spec.out_frames(t_in))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if self.spec.transposed {
            let (off, n) = self.batch_crop(x.dim(1));
            Ok(conv_transpose2d_raw(&self.spec, x, &self.weight, &self.bias, off, n)?.0)
        } else {
            Ok(conv2d_raw(
                &self.spec,
                x,
                &self.weight,
                &self.bias,
                self.spec.time_pad(),
            )?
            .0)
        }
    }

    pub fn forward_tape<'t>(
        &self,
        tape: &'t Tape<T>,
        prefix: &str,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let w = tape.param(&join(prefix, "weight"), &self.weight);
        let b = tape.param(&join(prefix, "bias"), &self.bias);
        if self.spec.transposed {
            let (off, n) = self.batch_crop(x.value().dim(1));
            conv_transpose2d(&self.spec, x, w, b, off, n)
        } else {
            conv2d(&self.spec, x, w, b, self.spec.time_pad())
        }
    }

    /// Fresh stream state for inputs with `f_in` bins.
    pub fn stream(&self, f_in: usize) -> Result<ConvStream<T>> {
        if !self.spec.causal_time {
            return Err(Error::config("only time-causal convolutions can stream"));
        }
        self.spec.out_freq(f_in)?;
        let hist = if self.spec.transposed {
            self.spec.kernel.0.div_ceil(self.spec.stride.0) - 1
        } else {
            self.spec.time_pad()
        };
        Ok(ConvStream {
            buf: Tensor::zeros(&[self.spec.in_ch, hist, f_in]),
        })
    }

    /// Feeds `[C, n, F]` frames; returns every output frame they complete.
    pub fn push(&self, st: &mut ConvStream<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (c, n, f) = dims3(x.shape());
        if c != self.spec.in_ch || f != st.buf.dim(2) {
            return Err(Error::shape(format!(
                "stream frame {:?} does not match state {:?}",
                x.shape(),
                st.buf.shape()
            )));
        }
        let window = Tensor::concat_time(&[&st.buf, x])?;
        let total = window.dim(1);
        if self.spec.transposed {
            let hist = st.buf.dim(1);
            let (out, _) = conv_transpose2d_raw(
                &self.spec,
                &window,
                &self.weight,
                &self.bias,
                hist * self.spec.stride.0,
                n * self.spec.stride.0,
            )?;
            st.buf = window.narrow_time(total - hist, total);
            Ok(out)
        } else {
            let (out, _, _) = conv2d_raw(&self.spec, &window, &self.weight, &self.bias, 0)?;
            let used = out.dim(1) * self.spec.stride.0;
            st.buf = window.narrow_time(used, total);
            Ok(out)
        }
    }
}

impl<T: Real> Params<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}
