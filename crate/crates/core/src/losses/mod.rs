//! Training objective: weighted sum of reconstruction, adversarial,
//! feature-matching, commitment and spectral terms. Adversarial and
//! feature-matching terms come from an optional [`Discriminator`] and are
//! zero without one.

mod mel;
mod synth;

pub use mel::{hz_to_mel, mel_to_hz, MelLoss, MelScale, DEFAULT_MEL_SCALES, MEL_EPS};
pub use synth::{expand, synthesize};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Real, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_rec: f64,
    pub lambda_adv: f64,
    pub lambda_feat: f64,
    pub lambda_cmt: f64,
    /// Weight of the compressed complex-spectrum MSE between decoder output
    /// and encoder input. Zero by default.
    #[serde(default)]
    pub lambda_spec: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_rec: 1.0,
            lambda_adv: 0.0,
            lambda_feat: 0.0,
            lambda_cmt: 0.25,
            lambda_spec: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.named() {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }

    fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("lambda_rec", self.lambda_rec),
            ("lambda_adv", self.lambda_adv),
            ("lambda_feat", self.lambda_feat),
            ("lambda_cmt", self.lambda_cmt),
            ("lambda_spec", self.lambda_spec),
        ]
    }
}

/// The loss components, either as tape values or plain numbers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts<P> {
    pub rec: P,
    pub adv: P,
    pub feat: P,
    pub cmt: P,
    pub spec: P,
}

impl<P: Copy> LossParts<P> {
    fn named(&self) -> [(&'static str, P); 5] {
        [
            ("rec", self.rec),
            ("adv", self.adv),
            ("feat", self.feat),
            ("cmt", self.cmt),
            ("spec", self.spec),
        ]
    }

    fn weighted(&self, w: &LossWeights) -> [(&'static str, P, f64); 5] {
        let ws = w.named();
        let ps = self.named();
        std::array::from_fn(|i| (ps[i].0, ps[i].1, ws[i].1))
    }
}

impl LossParts<f64> {
    /// `sum_i lambda_i * part_i` in a fixed order.
    pub fn total(&self, w: &LossWeights) -> Result<f64> {
        let mut acc = 0.0;
        for (name, p, l) in self.weighted(w) {
            if p.is_nan() {
                return Err(Error::input(format!("loss part {name} is NaN")));
            }
            acc += l * p;
        }
        Ok(acc)
    }
}

/// Differentiable weighted sum; gradient with respect to each part is its
/// weight.
pub fn total_loss<'t, T: Real>(
    parts: &LossParts<Var<'t, T>>,
    w: &LossWeights,
) -> Result<Var<'t, T>> {
    let mut acc: Option<Var<'t, T>> = None;
    for (name, p, l) in parts.weighted(w) {
        if p.value().data().iter().any(|v| v.is_nan()) {
            return Err(Error::input(format!("loss part {name} is NaN")));
        }
        let term = p.scale(T::lit(l));
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(term)?,
        });
    }
    Ok(acc.expect("five parts"))
}

/// Reconstruction term: multi-scale log-mel L1 between reference audio and
/// a differentiable estimate of equal length.
pub fn recon_loss<'t, T: Real>(mel: &MelLoss, x: &[f64], x_hat: Var<'t, T>) -> Result<Var<'t, T>> {
    mel.loss(x, x_hat)
}

/// Plug-in point for adversarial training. Both terms enter the objective
/// with their weights; without a discriminator they are constant zero.
pub trait Discriminator {
    fn adversarial<'t>(
        &self,
        tape: &'t Tape<f32>,
        x: &[f64],
        x_hat: Var<'t, f32>,
    ) -> Result<Var<'t, f32>>;
    fn feature_matching<'t>(
        &self,
        tape: &'t Tape<f32>,
        x: &[f64],
        x_hat: Var<'t, f32>,
    ) -> Result<Var<'t, f32>>;
}
