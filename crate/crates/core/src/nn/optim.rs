use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    AdamStyle,
}

/// First-order optimizer over named parameters.
pub struct Optimizer<T: Real> {
    kind: OptimizerKind,
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    step: i32,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: T) -> Self {
        Self {
            kind,
            lr,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn lr(&self) -> T {
        self.lr
    }

    pub fn set_lr(&mut self, lr: T) {
        self.lr = lr;
    }

    /// Advances the step counter. Call once per optimization step, before
    /// the per-parameter [`update`](Self::update) calls.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, name: &str, param: &mut Tensor<T>, grad: &Tensor<T>) {
        debug_assert_eq!(param.shape(), grad.shape(), "{name}");
        if self.lr == T::zero() {
            return;
        }
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, &g) in param.data_mut().iter_mut().zip(grad.data()) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::AdamStyle => {
                let n = param.len();
                let (m, v) = self
                    .moments
                    .entry(name.to_string())
                    .or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
                let b1 = self.beta1;
                let b2 = self.beta2;
                let bc1 = T::one() - b1.powi(self.step.max(1));
                let bc2 = T::one() - b2.powi(self.step.max(1));
                let step_size = self.lr * bc2.sqrt() / bc1;
                for (((p, &g), m), v) in param
                    .data_mut()
                    .iter_mut()
                    .zip(grad.data())
                    .zip(m.iter_mut())
                    .zip(v.iter_mut())
                {
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    *p -= step_size * *m / (v.sqrt() + self.eps);
                }
            }
        }
    }
}

/// Rescales gradients in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [(String, Tensor<T>)], max_norm: T) -> T {
    let total: T = grads
        .iter()
        .map(|(_, g)| g.sq_norm())
        .fold(T::zero(), |a, b| a + b)
        .sqrt();
    if total > max_norm && total > T::zero() {
        let c = max_norm / total;
        for (_, g) in grads.iter_mut() {
            g.scale_inplace(c);
        }
    }
    total
}
