//! Snake activation `x + sin^2(a x) / a` with one `a` per channel of a
//! `[C, T, F]` map.

use super::{join, Params};
use crate::error::{Error, Result};
use crate::nn::tensor::dims3;
use crate::nn::{Real, Tape, Tensor, Var};

/// Lower bound kept on `a` after optimizer steps.
pub const SNAKE_MIN_ALPHA: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct Snake2d<T: Real> {
    pub alpha: Tensor<T>,
}

#[inline]
fn snake<T: Real>(x: T, a: T) -> T {
    let s = (a * x).sin();
    x + s * s / a
}

fn check<T: Real>(x: &Tensor<T>, alpha: &Tensor<T>) -> Result<()> {
    if x.ndim() != 3 || alpha.shape() != [x.dim(0)] {
        return Err(Error::shape(format!(
            "snake: x {:?} with alpha {:?}",
            x.shape(),
            alpha.shape()
        )));
    }
    Ok(())
}

fn apply<T: Real>(x: &Tensor<T>, alpha: &[T]) -> Vec<T> {
    let (_, t, f) = dims3(x.shape());
    let plane = t * f;
    x.data()
        .iter()
        .enumerate()
        .map(|(k, &v)| snake(v, alpha[k / plane]))
        .collect()
}

impl<T: Real> Snake2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            alpha: Tensor::ones(&[channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.alpha.len()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        check(x, &self.alpha)?;
        Tensor::new(x.shape(), apply(x, self.alpha.data()))
    }

    pub fn forward_tape<'t>(
        &self,
        tape: &'t Tape<T>,
        prefix: &str,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let a = tape.param(&join(prefix, "alpha"), &self.alpha);
        snake2d(x, a)
    }

    pub fn clamp_alpha(&mut self) {
        let lo = T::lit(SNAKE_MIN_ALPHA);
        self.alpha.data_mut().iter_mut().for_each(|a| {
            if !(*a >= lo) {
                *a = lo;
            }
        });
    }
}

/// Differentiable per-channel snake.
pub fn snake2d<'t, T: Real>(x: Var<'t, T>, alpha: Var<'t, T>) -> Result<Var<'t, T>> {
    let (xv, av) = (x.value(), alpha.value());
    check(&xv, &av)?;
    let out = apply(&xv, av.data());
    Ok(x.tape().op(
        Tensor::new(xv.shape(), out)?,
        &[x, alpha],
        Box::new(move |gy, needs| {
            let (c, t, f) = dims3(xv.shape());
            let plane = t * f;
            let g = gy.data();
            let xs = xv.data();
            let a = av.data();
            let gx = needs[0].then(|| {
                let d = (0..g.len())
                    .map(|k| {
                        let ak = a[k / plane];
                        g[k] * (T::one() + (T::lit(2.0) * ak * xs[k]).sin())
                    })
                    .collect();
                Tensor::new(xv.shape(), d).unwrap()
            });
            let ga = needs[1].then(|| {
                Tensor::from_vec(
                    (0..c)
                        .map(|ci| {
                            let ak = a[ci];
                            (ci * plane..(ci + 1) * plane).fold(T::zero(), |acc, k| {
                                let x = xs[k];
                                let s = (ak * x).sin();
                                let d = x * (T::lit(2.0) * ak * x).sin() / ak - s * s / (ak * ak);
                                acc + g[k] * d
                            })
                        })
                        .collect(),
                )
            });
            vec![gx, ga]
        }),
    ))
}

impl<T: Real> Params<T> for Snake2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&join(prefix, "alpha"), &self.alpha);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join(prefix, "alpha"), &mut self.alpha);
    }
}
