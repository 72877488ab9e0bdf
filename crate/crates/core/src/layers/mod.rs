//! Network building blocks over `[C, T, F]` feature maps. Each layer has a
//! batch forward on plain tensors, a differentiable forward on a tape, and
//! (where it has temporal state) a streaming forward that reproduces the
//! batch result for any chunking.

mod conv;
mod geom;
mod gru;
mod norm;
mod rnn2d;
mod snake;

pub use conv::{conv2d, conv_transpose2d, Conv2d, Conv2dSpec, ConvStream};
pub use gru::{gru_sequence, Gru, GruSpec};
pub use norm::{flnorm, FLNorm, FLNORM_EPS};
pub use rnn2d::{Rnn2dBlock, Rnn2dStream};
pub use snake::{snake2d, Snake2d, SNAKE_MIN_ALPHA};

use crate::nn::{Real, Tensor};

/// Named parameter traversal.
pub trait Params<T: Real> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>));

    fn param_total(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[cfg(test)]
mod tests;
