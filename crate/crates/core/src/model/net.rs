//! Encoder and decoder stacks. The encoder maps a compressed spectrum
//! `[2, T, F]` (real and imaginary planes) to latent rows `[T / S, D]`; the
//! decoder inverts the shape. Both are causal in time and stream.

use rand::Rng;

use super::config::ModelConfig;
use crate::dsp::{Complex64, ComplexSpectrogram, SpectralScale, StftConfig};
use crate::error::{Error, Result};
use crate::layers::{join, Conv2d, ConvStream, Params, Rnn2dBlock, Rnn2dStream, Snake2d};
use crate::nn::{Real, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct DownBlock<T: Real> {
    pub down: Conv2d<T>,
    pub act: Snake2d<T>,
    pub rnn: Rnn2dBlock<T>,
}

#[derive(Clone, Debug)]
pub struct UpBlock<T: Real> {
    pub rnn: Rnn2dBlock<T>,
    pub up: Conv2d<T>,
    pub act: Snake2d<T>,
}

#[derive(Clone, Debug)]
pub struct Encoder<T: Real> {
    pub cfg: ModelConfig,
    pub stem: Conv2d<T>,
    pub stem_act: Snake2d<T>,
    /// Indexed by level; run in ascending order.
    pub blocks: Vec<DownBlock<T>>,
}

#[derive(Clone, Debug)]
pub struct Decoder<T: Real> {
    pub cfg: ModelConfig,
    /// Indexed by the encoder level they mirror; run in descending order.
    pub blocks: Vec<UpBlock<T>>,
    pub head: Conv2d<T>,
}

/// Per-stream encoder state.
#[derive(Clone, Debug)]
pub struct EncoderStream<T: Real> {
    stem: ConvStream<T>,
    blocks: Vec<(ConvStream<T>, Rnn2dStream<T>)>,
}

/// Per-stream decoder state.
#[derive(Clone, Debug)]
pub struct DecoderStream<T: Real> {
    blocks: Vec<(Rnn2dStream<T>, ConvStream<T>)>,
    head: ConvStream<T>,
}

impl<T: Real> EncoderStream<T> {
    /// Values held across pushes; constant over the life of a stream.
    pub fn state_len(&self) -> usize {
        self.stem.len()
            + self
                .blocks
                .iter()
                .map(|(c, r)| c.len() + r.hidden().len())
                .sum::<usize>()
    }
}

impl<T: Real> DecoderStream<T> {
    pub fn state_len(&self) -> usize {
        self.head.len()
            + self
                .blocks
                .iter()
                .map(|(r, c)| c.len() + r.hidden().len())
                .sum::<usize>()
    }
}

/// `[C, T, F]` bottleneck map to `[T, C * F]` rows.
fn to_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, t, f) = (x.dim(0), x.dim(1), x.dim(2));
    let mut out = vec![T::zero(); c * t * f];
    let d = x.data();
    for ci in 0..c {
        for ti in 0..t {
            let src = &d[(ci * t + ti) * f..(ci * t + ti + 1) * f];
            out[ti * c * f + ci * f..ti * c * f + (ci + 1) * f].copy_from_slice(src);
        }
    }
    Tensor::new(&[t, c * f], out)
}

fn from_rows<T: Real>(z: &Tensor<T>, c: usize, f: usize) -> Result<Tensor<T>> {
    let t = z.dim(0);
    let mut out = vec![T::zero(); c * t * f];
    let d = z.data();
    for ti in 0..t {
        for ci in 0..c {
            out[(ci * t + ti) * f..(ci * t + ti + 1) * f]
                .copy_from_slice(&d[ti * c * f + ci * f..ti * c * f + (ci + 1) * f]);
        }
    }
    Tensor::new(&[c, t, f], out)
}

impl<T: Real> Encoder<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let freq = cfg.freq_chain()?;
        let stem = Conv2d::new(cfg.stem_spec(), rng)?;
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for i in 0..cfg.n_blocks {
            let c = cfg.channels[i + 1];
            blocks.push(DownBlock {
                down: Conv2d::new(cfg.down_spec(i), rng)?,
                act: Snake2d::new(c),
                rnn: Rnn2dBlock::new(c, freq[i + 1], cfg.gru_hidden(i), cfg.rnn_residual, rng)?,
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            stem_act: Snake2d::new(cfg.channels[0]),
            stem,
            blocks,
        })
    }

    fn check(&self, x: &Tensor<T>, batch: bool) -> Result<()> {
        if x.ndim() != 3 || x.dim(0) != 2 || x.dim(2) != self.cfg.input_bins {
            return Err(Error::shape(format!(
                "encoder expects [2, T, {}], got {:?}",
                self.cfg.input_bins,
                x.shape()
            )));
        }
        let s = self.cfg.time_stride();
        if batch && (x.dim(1) == 0 || x.dim(1) % s != 0) {
            return Err(Error::shape(format!(
                "encoder needs a positive frame count divisible by {s}, got {}",
                x.dim(1)
            )));
        }
        Ok(())
    }

    /// `[2, T, F]` -> `[T / S, latent_dim]`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x, true)?;
        let mut h = self.stem_act.forward(&self.stem.forward(x)?)?;
        for b in &self.blocks {
            h = b.act.forward(&b.down.forward(&h)?)?;
            h = b.rnn.forward(&h)?;
        }
        to_rows(&h)
    }

    pub fn forward_tape<'t>(
        &self,
        tape: &'t Tape<T>,
        prefix: &str,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        self.check(&x.value(), true)?;
        let h = self.stem.forward_tape(tape, &join(prefix, "stem"), x)?;
        let mut h = self
            .stem_act
            .forward_tape(tape, &join(prefix, "stem_act"), h)?;
        for (i, b) in self.blocks.iter().enumerate() {
            let p = join(prefix, &format!("blocks.{i}"));
            h = b.down.forward_tape(tape, &join(&p, "down"), h)?;
            h = b.act.forward_tape(tape, &join(&p, "act"), h)?;
            h = b.rnn.forward_tape(tape, &join(&p, "rnn"), h)?;
        }
        let s = h.shape();
        let (c, t, f) = (s[0], s[1], s[2]);
        h.permute3([1, 0, 2])?.reshape(&[t, c * f])
    }

    pub fn stream(&self) -> Result<EncoderStream<T>> {
        let freq = self.cfg.freq_chain()?;
        Ok(EncoderStream {
            stem: self.stem.stream(freq[0])?,
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| Ok((b.down.stream(freq[i])?, b.rnn.stream())))
                .collect::<Result<_>>()?,
        })
    }

    /// Feeds `[2, n, F]` frames; returns the latent rows they complete.
    pub fn push(&self, st: &mut EncoderStream<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x, false)?;
        let mut h = self.stem_act.forward(&self.stem.push(&mut st.stem, x)?)?;
        for (b, (cs, rs)) in self.blocks.iter().zip(st.blocks.iter_mut()) {
            h = b.act.forward(&b.down.push(cs, &h)?)?;
            h = b.rnn.push(rs, &h)?;
        }
        to_rows(&h)
    }
}

impl<T: Real> Decoder<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let freq = cfg.freq_chain()?;
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for i in 0..cfg.n_blocks {
            let c = cfg.channels[i + 1];
            blocks.push(UpBlock {
                rnn: Rnn2dBlock::new(c, freq[i + 1], cfg.gru_hidden(i), cfg.rnn_residual, rng)?,
                up: Conv2d::new(cfg.up_spec(i), rng)?,
                act: Snake2d::new(cfg.channels[i]),
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            blocks,
            head: Conv2d::new(cfg.head_spec(), rng)?,
        })
    }

    fn check(&self, z: &Tensor<T>) -> Result<()> {
        if z.ndim() != 2 || z.dim(1) != self.cfg.latent_dim {
            return Err(Error::shape(format!(
                "decoder expects [T, {}], got {:?}",
                self.cfg.latent_dim,
                z.shape()
            )));
        }
        Ok(())
    }

    fn unrows(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let c = self.cfg.channels[self.cfg.n_blocks];
        from_rows(z, c, self.cfg.latent_dim / c)
    }

    /// `[T', latent_dim]` -> `[2, T' * S, F]`.
    pub fn forward(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(z)?;
        let mut h = self.unrows(z)?;
        for b in self.blocks.iter().rev() {
            h = b.rnn.forward(&h)?;
            h = b.act.forward(&b.up.forward(&h)?)?;
        }
        self.head.forward(&h)
    }

    pub fn forward_tape<'t>(
        &self,
        tape: &'t Tape<T>,
        prefix: &str,
        z: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        self.check(&z.value())?;
        let c = self.cfg.channels[self.cfg.n_blocks];
        let t = z.shape()[0];
        let mut h = z
            .reshape(&[t, c, self.cfg.latent_dim / c])?
            .permute3([1, 0, 2])?;
        for (i, b) in self.blocks.iter().enumerate().rev() {
            let p = join(prefix, &format!("blocks.{i}"));
            h = b.rnn.forward_tape(tape, &join(&p, "rnn"), h)?;
            h = b.up.forward_tape(tape, &join(&p, "up"), h)?;
            h = b.act.forward_tape(tape, &join(&p, "act"), h)?;
        }
        self.head.forward_tape(tape, &join(prefix, "head"), h)
    }

    pub fn stream(&self) -> Result<DecoderStream<T>> {
        let freq = self.cfg.freq_chain()?;
        Ok(DecoderStream {
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| Ok((b.rnn.stream(), b.up.stream(freq[i + 1])?)))
                .collect::<Result<_>>()?,
            head: self.head.stream(freq[0])?,
        })
    }

    /// Feeds `[m, latent_dim]` rows; returns `[2, m * S, F]` frames.
    pub fn push(&self, st: &mut DecoderStream<T>, z: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(z)?;
        let mut h = self.unrows(z)?;
        for (b, (rs, cs)) in self.blocks.iter().zip(st.blocks.iter_mut()).rev() {
            h = b.rnn.push(rs, &h)?;
            h = b.act.forward(&b.up.push(cs, &h)?)?;
        }
        self.head.push(&mut st.head, &h)
    }
}

/// Encoder and decoder trained together as one codec.
#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
}

impl<T: Real> Model<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        Ok(Self {
            encoder: Encoder::new(cfg, rng)?,
            decoder: Decoder::new(cfg, rng)?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.encoder.cfg
    }

    /// Spectral frames of lookahead: output frame `m` depends on input
    /// frames up to `S * floor(m / S) + S - 1`.
    pub fn latency_frames(&self) -> usize {
        self.config().time_stride() - 1
    }

    /// Worst-case samples of input needed beyond an output sample before it
    /// is final: the analysis window reach plus one latent frame, less one.
    pub fn latency(&self, stft: &StftConfig) -> usize {
        stft.left_pad() + self.config().time_stride() * stft.hop - 1
    }

    pub fn clamp_snake(&mut self) {
        self.encoder.stem_act.clamp_alpha();
        for b in &mut self.encoder.blocks {
            b.act.clamp_alpha();
            b.rnn.snake.clamp_alpha();
        }
        for b in &mut self.decoder.blocks {
            b.act.clamp_alpha();
            b.rnn.snake.clamp_alpha();
        }
    }
}

impl<T: Real> Params<T> for Encoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.stem.visit(&join(prefix, "stem"), f);
        self.stem_act.visit(&join(prefix, "stem_act"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            let p = join(prefix, &format!("blocks.{i}"));
            b.down.visit(&join(&p, "down"), f);
            b.act.visit(&join(&p, "act"), f);
            b.rnn.visit(&join(&p, "rnn"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        self.stem_act.visit_mut(&join(prefix, "stem_act"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = join(prefix, &format!("blocks.{i}"));
            b.down.visit_mut(&join(&p, "down"), f);
            b.act.visit_mut(&join(&p, "act"), f);
            b.rnn.visit_mut(&join(&p, "rnn"), f);
        }
    }
}

impl<T: Real> Params<T> for Decoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            let p = join(prefix, &format!("blocks.{i}"));
            b.rnn.visit(&join(&p, "rnn"), f);
            b.up.visit(&join(&p, "up"), f);
            b.act.visit(&join(&p, "act"), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = join(prefix, &format!("blocks.{i}"));
            b.rnn.visit_mut(&join(&p, "rnn"), f);
            b.up.visit_mut(&join(&p, "up"), f);
            b.act.visit_mut(&join(&p, "act"), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

impl<T: Real> Params<T> for Model<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
    }
}

/// Packs spectral frames into an encoder input `[2, n, bins]`, keeping the
/// lowest `bins` bins of each frame.
pub fn frames_to_input<T: Real>(frames: &[&[Complex64]], bins: usize) -> Result<Tensor<T>> {
    let n = frames.len();
    let mut out = vec![T::zero(); 2 * n * bins];
    for (t, fr) in frames.iter().enumerate() {
        if fr.len() < bins {
            return Err(Error::shape(format!(
                "frame has {} bins, need {bins}",
                fr.len()
            )));
        }
        for (k, c) in fr[..bins].iter().enumerate() {
            out[t * bins + k] = T::lit(c.re);
            out[(n + t) * bins + k] = T::lit(c.im);
        }
    }
    Tensor::new(&[2, n, bins], out)
}

/// Unpacks a decoder output `[2, n, F]` into frames of `total_bins` bins; bins
/// at and above `F` are zero.
pub fn output_to_frames<T: Real>(y: &Tensor<T>, total_bins: usize) -> Result<Vec<Vec<Complex64>>> {
    if y.ndim() != 3 || y.dim(0) != 2 || y.dim(2) > total_bins {
        return Err(Error::shape(format!(
            "decoder output {:?} does not fit {total_bins} bins",
            y.shape()
        )));
    }
    let (n, f) = (y.dim(1), y.dim(2));
    let d = y.data();
    Ok((0..n)
        .map(|t| {
            let mut fr = vec![Complex64::new(0.0, 0.0); total_bins];
            for (k, v) in fr.iter_mut().take(f).enumerate() {
                *v = Complex64::new(d[t * f + k].to_f64(), d[(n + t) * f + k].to_f64());
            }
            fr
        })
        .collect())
}

/// Compressed spectrogram to encoder input.
pub fn spectrum_to_input<T: Real>(spec: &ComplexSpectrogram, bins: usize) -> Result<Tensor<T>> {
    let frames: Vec<&[Complex64]> = (0..spec.frames()).map(|t| spec.frame(t)).collect();
    frames_to_input(&frames, bins)
}

/// Decoder output to a compressed spectrogram.
pub fn output_to_spectrum<T: Real>(
    y: &Tensor<T>,
    config: StftConfig,
    signal_len: usize,
) -> Result<ComplexSpectrogram> {
    let frames = output_to_frames(y, config.freq_bins())?;
    let n = frames.len();
    ComplexSpectrogram::new(
        n,
        frames.into_iter().flatten().collect(),
        config,
        SpectralScale::Compressed,
        signal_len,
    )
}
