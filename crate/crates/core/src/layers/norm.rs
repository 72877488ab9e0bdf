//! Frame-wise layer normalization: each time step of a `[C, T, F]` map is
//! standardized over its `C x F` values, then scaled and shifted per channel.

use super::{join, Params};
use crate::error::{Error, Result};
use crate::nn::tensor::dims3;
use crate::nn::{Real, Tape, Tensor, Var};

pub const FLNORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct FLNorm<T: Real> {
    pub channels: usize,
    pub eps: f64,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

/// Standardized values plus the per-frame `1/sqrt(var + eps)`.
fn standardize<T: Real>(x: &Tensor<T>, eps: T) -> (Vec<T>, Vec<T>) {
    let (c, t, f) = dims3(x.shape());
    let n = T::lit((c * f) as f64);
    let d = x.data();
    let mut xhat = vec![T::zero(); d.len()];
    let mut inv_std = vec![T::zero(); t];
    for ti in 0..t {
        let mut sum = T::zero();
        for ci in 0..c {
            for &v in &d[(ci * t + ti) * f..(ci * t + ti + 1) * f] {
                sum += v;
            }
        }
        let mean = sum / n;
        let mut sq = T::zero();
        for ci in 0..c {
            for &v in &d[(ci * t + ti) * f..(ci * t + ti + 1) * f] {
                sq += (v - mean) * (v - mean);
            }
        }
        let inv = T::one() / (sq / n + eps).sqrt();
        inv_std[ti] = inv;
        for ci in 0..c {
            let o = (ci * t + ti) * f;
            for k in o..o + f {
                xhat[k] = (d[k] - mean) * inv;
            }
        }
    }
    (xhat, inv_std)
}

fn affine<T: Real>(xhat: &[T], gamma: &[T], beta: &[T], shape: &[usize]) -> Vec<T> {
    let (_, t, f) = dims3(shape);
    let plane = t * f;
    xhat.iter()
        .enumerate()
        .map(|(k, &v)| gamma[k / plane] * v + beta[k / plane])
        .collect()
}

impl<T: Real> FLNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            eps: FLNORM_EPS,
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        if x.ndim() != 3 || x.dim(0) != self.channels {
            return Err(Error::shape(format!(
                "FLNorm over {} channels got {:?}",
                self.channels,
                x.shape()
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("FLNorm eps must be positive"));
        }
        Ok(())
    }

    /// Standardization only, without the affine step.
    pub fn normalize(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let (xhat, _) = standardize(x, T::lit(self.eps));
        Tensor::new(x.shape(), xhat)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let (xhat, _) = standardize(x, T::lit(self.eps));
        Tensor::new(
            x.shape(),
            affine(&xhat, self.gamma.data(), self.beta.data(), x.shape()),
        )
    }

    pub fn forward_tape<'t>(
        &self,
        tape: &'t Tape<T>,
        prefix: &str,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let g = tape.param(&join(prefix, "gamma"), &self.gamma);
        let b = tape.param(&join(prefix, "beta"), &self.beta);
        flnorm(x, g, b, self.eps)
    }
}

/// Differentiable frame-wise layer norm.
pub fn flnorm<'t, T: Real>(
    x: Var<'t, T>,
    gamma: Var<'t, T>,
    beta: Var<'t, T>,
    eps: f64,
) -> Result<Var<'t, T>> {
    let xv = x.value();
    let (gv, bv) = (gamma.value(), beta.value());
    if xv.ndim() != 3 || gv.shape() != [xv.dim(0)] || bv.shape() != [xv.dim(0)] {
        return Err(Error::shape(format!(
            "flnorm: x {:?}, gamma {:?}, beta {:?}",
            xv.shape(),
            gv.shape(),
            bv.shape()
        )));
    }
    let (xhat, inv_std) = standardize(&xv, T::lit(eps));
    let out = affine(&xhat, gv.data(), bv.data(), xv.shape());
    let shape = xv.shape().to_vec();
    Ok(x.tape().op(
        Tensor::new(&shape, out)?,
        &[x, gamma, beta],
        Box::new(move |gy, needs| {
            let (c, t, f) = dims3(&shape);
            let g = gy.data();
            let gam = gv.data();
            let gx = needs[0].then(|| {
                let n = T::lit((c * f) as f64);
                let mut dx = vec![T::zero(); g.len()];
                for ti in 0..t {
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for ci in 0..c {
                        let o = (ci * t + ti) * f;
                        for k in o..o + f {
                            let dxh = g[k] * gam[ci];
                            m1 += dxh;
                            m2 += dxh * xhat[k];
                        }
                    }
                    m1 = m1 / n;
                    m2 = m2 / n;
                    for ci in 0..c {
                        let o = (ci * t + ti) * f;
                        for k in o..o + f {
                            let dxh = g[k] * gam[ci];
                            dx[k] = inv_std[ti] * (dxh - m1 - xhat[k] * m2);
                        }
                    }
                }
                Tensor::new(&shape, dx).unwrap()
            });
            let plane = t * f;
            let gg = needs[1].then(|| {
                Tensor::from_vec(
                    (0..c)
                        .map(|ci| {
                            (ci * plane..(ci + 1) * plane)
                                .fold(T::zero(), |a, k| a + g[k] * xhat[k])
                        })
                        .collect(),
                )
            });
            let gb = needs[2].then(|| {
                Tensor::from_vec(
                    (0..c)
                        .map(|ci| {
                            g[ci * plane..(ci + 1) * plane]
                                .iter()
                                .fold(T::zero(), |a, &v| a + v)
                        })
                        .collect(),
                )
            });
            vec![gx, gg, gb]
        }),
    ))
}

impl<T: Real> Params<T> for FLNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}
