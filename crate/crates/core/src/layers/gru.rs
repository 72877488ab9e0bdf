//! Gated recurrent unit with gates ordered (reset, update, candidate):
//!
//! ```text
//! r = sigmoid(W_ir x + b_ir + W_hr h + b_hr)
//! z = sigmoid(W_iz x + b_iz + W_hz h + b_hz)
//! n = tanh(W_in x + b_in + r * (W_hn h + b_hn))
//! h' = (1 - z) * n + z * h
//! ```
//!
//! Sequences are `[T, B, I]`: `B` independent rows advance in lockstep.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{join, Params};
use crate::error::{Error, Result};
use crate::nn::ops::sigmoid;
use crate::nn::tensor::{matmul_acc, matmul_tn_acc, transpose};
use crate::nn::{Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GruSpec {
    pub input_size: usize,
    pub hidden_size: usize,
}

impl GruSpec {
    pub fn param_count(&self) -> usize {
        let (i, h) = (self.input_size, self.hidden_size);
        3 * h * (i + h) + 6 * h
    }

    /// Multiply-accumulates per row per step.
    pub fn macs_per_step(&self) -> usize {
        3 * self.hidden_size * (self.input_size + self.hidden_size)
    }
}

#[derive(Clone, Debug)]
pub struct Gru<T: Real> {
    pub spec: GruSpec,
    /// `[3H, I]`
    pub w_ih: Tensor<T>,
    /// `[3H, H]`
    pub w_hh: Tensor<T>,
    pub b_ih: Tensor<T>,
    pub b_hh: Tensor<T>,
}

struct StepCache<T> {
    r: Vec<T>,
    z: Vec<T>,
    n: Vec<T>,
    ghn: Vec<T>,
    h_prev: Vec<T>,
}

fn rows_plus_bias<T: Real>(bias: &[T], rows: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(bias.len() * rows);
    for _ in 0..rows {
        out.extend_from_slice(bias);
    }
    out
}

impl<T: Real> Gru<T> {
    pub fn new<R: Rng + ?Sized>(spec: GruSpec, rng: &mut R) -> Self {
        let (i, h) = (spec.input_size, spec.hidden_size);
        let k = 1.0 / (h as f64).sqrt();
        Self {
            spec,
            w_ih: Tensor::uniform(&[3 * h, i], -k, k, rng),
            w_hh: Tensor::uniform(&[3 * h, h], -k, k, rng),
            b_ih: Tensor::uniform(&[3 * h], -k, k, rng),
            b_hh: Tensor::uniform(&[3 * h], -k, k, rng),
        }
    }

    pub fn zeros(spec: GruSpec) -> Self {
        let (i, h) = (spec.input_size, spec.hidden_size);
        Self {
            spec,
            w_ih: Tensor::zeros(&[3 * h, i]),
            w_hh: Tensor::zeros(&[3 * h, h]),
            b_ih: Tensor::zeros(&[3 * h]),
            b_hh: Tensor::zeros(&[3 * h]),
        }
    }

    fn check(&self, x: &Tensor<T>, h0: &[T]) -> Result<(usize, usize)> {
        if x.ndim() != 3 || x.dim(2) != self.spec.input_size {
            return Err(Error::shape(format!(
                "GRU expects [T, B, {}], got {:?}",
                self.spec.input_size,
                x.shape()
            )));
        }
        let b = x.dim(1);
        if h0.len() != b * self.spec.hidden_size {
            return Err(Error::shape(format!(
                "GRU state has {} values, need {}x{}",
                h0.len(),
                b,
                self.spec.hidden_size
            )));
        }
        Ok((x.dim(0), b))
    }

    /// Input projections for all rows at once: `[T*B, 3H]`.
    fn input_gates(w_ih: &[T], b_ih: &[T], x: &[T], rows: usize, i: usize, h: usize) -> Vec<T> {
        let wt = transpose(w_ih, 3 * h, i);
        let mut gi = rows_plus_bias(b_ih, rows);
        matmul_acc(x, &wt, &mut gi, rows, i, 3 * h);
        gi
    }

    /// One step over `B` rows; `h` is updated in place.
    fn step(&self, gi: &[T], w_hh_t: &[T], h: &mut [T], cache: Option<&mut StepCache<T>>) {
        let hs = self.spec.hidden_size;
        let b = h.len() / hs;
        let mut gh = rows_plus_bias(self.b_hh.data(), b);
        matmul_acc(h, w_hh_t, &mut gh, b, hs, 3 * hs);
        let mut cache = cache;
        if let Some(c) = cache.as_deref_mut() {
            c.h_prev.extend_from_slice(h);
        }
        for row in 0..b {
            let gi = &gi[row * 3 * hs..(row + 1) * 3 * hs];
            let gh = &gh[row * 3 * hs..(row + 1) * 3 * hs];
            let hr = &mut h[row * hs..(row + 1) * hs];
            for j in 0..hs {
                let r = sigmoid(gi[j] + gh[j]);
                let z = sigmoid(gi[hs + j] + gh[hs + j]);
                let ghn = gh[2 * hs + j];
                let n = (gi[2 * hs + j] + r * ghn).tanh();
                let prev = hr[j];
                hr[j] = (T::one() - z) * n + z * prev;
                if let Some(c) = cache.as_deref_mut() {
                    c.r.push(r);
                    c.z.push(z);
                    c.n.push(n);
                    c.ghn.push(ghn);
                }
            }
        }
    }

    fn run(
        &self,
        x: &Tensor<T>,
        h: &mut [T],
        mut cache: Option<&mut StepCache<T>>,
    ) -> Result<Tensor<T>> {
        let (steps, b) = self.check(x, h)?;
        let (i, hs) = (self.spec.input_size, self.spec.hidden_size);
        let gi = Self::input_gates(
            self.w_ih.data(),
            self.b_ih.data(),
            x.data(),
            steps * b,
            i,
            hs,
        );
        let w_hh_t = transpose(self.w_hh.data(), 3 * hs, hs);
        let mut out = Vec::with_capacity(steps * b * hs);
        for t in 0..steps {
            self.step(
                &gi[t * b * 3 * hs..(t + 1) * b * 3 * hs],
                &w_hh_t,
                h,
                cache.as_deref_mut(),
            );
            out.extend_from_slice(h);
        }
        Tensor::new(&[steps, b, hs], out)
    }

    /// Runs a `[T, B, I]` sequence from state `h` (`[B, H]`, updated in
    /// place) and returns all hidden states `[T, B, H]`.
    pub fn forward_seq(&self, x: &Tensor<T>, h: &mut [T]) -> Result<Tensor<T>> {
        self.run(x, h, None)
    }

    /// Single step on `[B, I]` input.
    pub fn forward_step(&self, x: &Tensor<T>, h_prev: &Tensor<T>) -> Result<Tensor<T>> {
        if x.ndim() != 2 {
            return Err(Error::shape(format!("gru step input {:?}", x.shape())));
        }
        let x3 = x.clone().reshape(&[1, x.dim(0), x.dim(1)])?;
        let mut h = h_prev.data().to_vec();
        self.run(&x3, &mut h, None)?;
        Tensor::new(h_prev.shape(), h)
    }

    pub fn forward_tape<'t>(
        &self,
        tape: &'t Tape<T>,
        prefix: &str,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let w_ih = tape.param(&join(prefix, "w_ih"), &self.w_ih);
        let w_hh = tape.param(&join(prefix, "w_hh"), &self.w_hh);
        let b_ih = tape.param(&join(prefix, "b_ih"), &self.b_ih);
        let b_hh = tape.param(&join(prefix, "b_hh"), &self.b_hh);
        gru_sequence(self.spec, x, w_ih, w_hh, b_ih, b_hh)
    }
}

/// Differentiable GRU over a `[T, B, I]` sequence from a zero state, with
/// backpropagation through time.
pub fn gru_sequence<'t, T: Real>(
    spec: GruSpec,
    x: Var<'t, T>,
    w_ih: Var<'t, T>,
    w_hh: Var<'t, T>,
    b_ih: Var<'t, T>,
    b_hh: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let (i, hs) = (spec.input_size, spec.hidden_size);
    let cell = Gru {
        spec,
        w_ih: (*w_ih.value()).clone(),
        w_hh: (*w_hh.value()).clone(),
        b_ih: (*b_ih.value()).clone(),
        b_hh: (*b_hh.value()).clone(),
    };
    if cell.w_ih.shape() != [3 * hs, i]
        || cell.w_hh.shape() != [3 * hs, hs]
        || cell.b_ih.shape() != [3 * hs]
        || cell.b_hh.shape() != [3 * hs]
    {
        return Err(Error::shape(format!("GRU weights do not match {spec:?}")));
    }
    let xv = x.value();
    if xv.ndim() != 3 {
        return Err(Error::shape(format!(
            "GRU expects [T, B, I], got {:?}",
            xv.shape()
        )));
    }
    let (steps, b) = (xv.dim(0), xv.dim(1));
    let mut h = vec![T::zero(); b * hs];
    let mut cache = StepCache {
        r: Vec::new(),
        z: Vec::new(),
        n: Vec::new(),
        ghn: Vec::new(),
        h_prev: Vec::new(),
    };
    let out = cell.run(&xv, &mut h, Some(&mut cache))?;

    Ok(x.tape().op(
        out,
        &[x, w_ih, w_hh, b_ih, b_hh],
        Box::new(move |gy, needs| {
            let g3 = 3 * hs;
            let rows = steps * b;
            let mut d_gi = vec![T::zero(); rows * g3];
            let mut d_whh = vec![T::zero(); g3 * hs];
            let mut d_bhh = vec![T::zero(); g3];
            let mut dh = vec![T::zero(); b * hs];
            let mut d_gh = vec![T::zero(); b * g3];
            for t in (0..steps).rev() {
                let base = t * b * hs;
                for (d, &g) in dh.iter_mut().zip(&gy.data()[base..base + b * hs]) {
                    *d += g;
                }
                let mut dh_prev = vec![T::zero(); b * hs];
                for row in 0..b {
                    for j in 0..hs {
                        let k = base + row * hs + j;
                        let (r, z, n) = (cache.r[k], cache.z[k], cache.n[k]);
                        let ghn = cache.ghn[k];
                        let hp = cache.h_prev[k];
                        let d = dh[row * hs + j];
                        let dn = d * (T::one() - z);
                        let dz = d * (hp - n);
                        dh_prev[row * hs + j] = d * z;
                        let dan = dn * (T::one() - n * n);
                        let dar = dan * ghn * r * (T::one() - r);
                        let daz = dz * z * (T::one() - z);
                        let gi_row = &mut d_gi[(t * b + row) * g3..(t * b + row + 1) * g3];
                        gi_row[j] = dar;
                        gi_row[hs + j] = daz;
                        gi_row[2 * hs + j] = dan;
                        let gh_row = &mut d_gh[row * g3..(row + 1) * g3];
                        gh_row[j] = dar;
                        gh_row[hs + j] = daz;
                        gh_row[2 * hs + j] = dan * r;
                    }
                }
                matmul_acc(&d_gh, cell.w_hh.data(), &mut dh_prev, b, g3, hs);
                if needs[2] {
                    matmul_tn_acc(
                        &d_gh,
                        &cache.h_prev[base..base + b * hs],
                        &mut d_whh,
                        b,
                        g3,
                        hs,
                    );
                }
                for row in d_gh.chunks_exact(g3) {
                    for (a, &v) in d_bhh.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                dh = dh_prev;
            }
            let gx = needs[0].then(|| {
                let mut dx = vec![T::zero(); rows * i];
                matmul_acc(&d_gi, cell.w_ih.data(), &mut dx, rows, g3, i);
                Tensor::new(&[steps, b, i], dx).unwrap()
            });
            let gw_ih = needs[1].then(|| {
                let mut dw = vec![T::zero(); g3 * i];
                matmul_tn_acc(&d_gi, xv.data(), &mut dw, rows, g3, i);
                Tensor::new(&[g3, i], dw).unwrap()
            });
            let gw_hh = needs[2].then(|| Tensor::new(&[g3, hs], d_whh).unwrap());
            let gb_ih = needs[3].then(|| {
                let mut db = vec![T::zero(); g3];
                for row in d_gi.chunks_exact(g3) {
                    for (a, &v) in db.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                Tensor::from_vec(db)
            });
            let gb_hh = needs[4].then(|| Tensor::from_vec(d_bhh));
            vec![gx, gw_ih, gw_hh, gb_ih, gb_hh]
        }),
    ))
}

impl<T: Real> Params<T> for Gru<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&join(prefix, "w_ih"), &self.w_ih);
        f(&join(prefix, "w_hh"), &self.w_hh);
        f(&join(prefix, "b_ih"), &self.b_ih);
        f(&join(prefix, "b_hh"), &self.b_hh);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join(prefix, "w_ih"), &mut self.w_ih);
        f(&join(prefix, "w_hh"), &mut self.w_hh);
        f(&join(prefix, "b_ih"), &mut self.b_ih);
        f(&join(prefix, "b_hh"), &mut self.b_hh);
    }
}
