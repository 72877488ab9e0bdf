//! Central finite-difference verification of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)` per input.
    pub rel_error: Vec<f64>,
    /// Largest elementwise absolute difference across all inputs.
    pub max_abs_error: f64,
}

impl GradCheckReport {
    pub fn worst_rel(&self) -> f64 {
        self.rel_error.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares the tape gradient of the scalar `f(inputs)` with central
/// differences of step `h`, one input element at a time.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F, h: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut rel_error = Vec::with_capacity(inputs.len());
    let mut max_abs_error = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let mut numeric = vec![0.0; inputs[i].len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let fp = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let fm = eval(&work)?;
            work[i].data_mut()[j] = orig;
            *slot = (fp - fm) / (2.0 * h);
        }
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for (&a, &n) in analytic.data().iter().zip(&numeric) {
            diff2 += (a - n) * (a - n);
            a2 += a * a;
            n2 += n * n;
            max_abs_error = max_abs_error.max((a - n).abs());
        }
        let denom = a2.sqrt().max(n2.sqrt());
        rel_error.push(if denom > 0.0 {
            diff2.sqrt() / denom
        } else {
            diff2.sqrt()
        });
    }
    Ok(GradCheckReport {
        rel_error,
        max_abs_error,
    })
}
