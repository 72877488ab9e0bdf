//! Recurrent block: FLNorm, tanh, a GRU along time shared across frequency
//! bins, a 1x1 conv back to the block width, Snake, and an optional residual.

use rand::Rng;

use super::conv::{Conv2d, Conv2dSpec};
use super::gru::{Gru, GruSpec};
use super::norm::FLNorm;
use super::snake::Snake2d;
use super::{join, Params};
use crate::error::{Error, Result};
use crate::nn::ops::permute3_raw;
use crate::nn::tensor::dims3;
use crate::nn::{Real, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Rnn2dBlock<T: Real> {
    pub channels: usize,
    pub freq: usize,
    pub residual: bool,
    pub norm: FLNorm<T>,
    pub gru: Gru<T>,
    pub proj: Conv2d<T>,
    pub snake: Snake2d<T>,
}

/// Per-bin GRU hidden state, `[F, H]`.
#[derive(Clone, Debug)]
pub struct Rnn2dStream<T> {
    h: Vec<T>,
}

impl<T: Real> Rnn2dStream<T> {
    pub fn hidden(&self) -> &[T] {
        &self.h
    }
}

fn permute<T: Real>(x: &Tensor<T>, perm: [usize; 3]) -> Tensor<T> {
    let (a, b, c) = dims3(x.shape());
    let (d, s) = permute3_raw(x.data(), [a, b, c], perm);
    Tensor::new(&s, d).expect("permutation keeps size")
}

impl<T: Real> Rnn2dBlock<T> {
    pub fn new<R: Rng + ?Sized>(
        channels: usize,
        freq: usize,
        hidden: usize,
        residual: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            channels,
            freq,
            residual,
            norm: FLNorm::new(channels),
            gru: Gru::new(
                GruSpec {
                    input_size: channels,
                    hidden_size: hidden,
                },
                rng,
            ),
            proj: Conv2d::new(Conv2dSpec::new(hidden, channels, (1, 1), (1, 1)), rng)?,
            snake: Snake2d::new(channels),
        })
    }

    pub fn hidden(&self) -> usize {
        self.gru.spec.hidden_size
    }

    pub fn param_count(&self) -> usize {
        self.norm.param_count()
            + self.gru.spec.param_count()
            + self.proj.spec.param_count()
            + self.channels
    }

    /// Multiply-accumulates per input frame.
    pub fn macs_per_frame(&self) -> usize {
        self.freq * (self.gru.spec.macs_per_step() + self.hidden() * self.channels)
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        if x.ndim() != 3 || x.dim(0) != self.channels || x.dim(2) != self.freq {
            return Err(Error::shape(format!(
                "RNN2D block [{}, T, {}] got {:?}",
                self.channels,
                self.freq,
                x.shape()
            )));
        }
        Ok(())
    }

    pub fn stream(&self) -> Rnn2dStream<T> {
        Rnn2dStream {
            h: vec![T::zero(); self.freq * self.hidden()],
        }
    }

    /// Processes `[C, n, F]` frames, carrying the GRU state.
    pub fn push(&self, st: &mut Rnn2dStream<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let y = self.norm.forward(x)?.map(|v| v.tanh());
        let rows = permute(&y, [1, 2, 0]);
        let h = self.gru.forward_seq(&rows, &mut st.h)?;
        let h = permute(&h, [2, 0, 1]);
        let y = self.snake.forward(&self.proj.forward(&h)?)?;
        if self.residual {
            Ok(y.zip_map(x, |a, b| a + b))
        } else {
            Ok(y)
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.push(&mut self.stream(), x)
    }

    pub fn forward_tape<'t>(
        &self,
        tape: &'t Tape<T>,
        prefix: &str,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        self.check(&x.value())?;
        let y = self
            .norm
            .forward_tape(tape, &join(prefix, "norm"), x)?
            .tanh();
        let rows = y.permute3([1, 2, 0])?;
        let h = self.gru.forward_tape(tape, &join(prefix, "gru"), rows)?;
        let h = h.permute3([2, 0, 1])?;
        let y = self.proj.forward_tape(tape, &join(prefix, "proj"), h)?;
        let y = self.snake.forward_tape(tape, &join(prefix, "snake"), y)?;
        if self.residual {
            y.add(x)
        } else {
            Ok(y)
        }
    }
}

impl<T: Real> Params<T> for Rnn2dBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.norm.visit(&join(prefix, "norm"), f);
        self.gru.visit(&join(prefix, "gru"), f);
        self.proj.visit(&join(prefix, "proj"), f);
        self.snake.visit(&join(prefix, "snake"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.gru.visit_mut(&join(prefix, "gru"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
        self.snake.visit_mut(&join(prefix, "snake"), f);
    }
}
