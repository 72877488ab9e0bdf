//! One vector-quantization codebook with a factorized lookup: inputs are
//! projected to a low-dimensional code space, matched there, and the chosen
//! entry is projected back.

use rand::Rng;

use super::kmeans::{kmeans, nearest};
use super::pool::DataPool;
use crate::error::{Error, Result};
use crate::layers::{join, Params};
use crate::nn::tensor::{matmul_acc, transpose};
use crate::nn::{Tape, Tensor, Var};

/// Floor on EMA counts when forming entries.
pub const EMA_EPS: f32 = 1e-5;

#[derive(Clone, Debug)]
pub struct Codebook {
    /// `[size, code_dim]`, in the projected space.
    pub entries: Tensor<f32>,
    /// `[size]`.
    pub ema_counts: Tensor<f32>,
    /// `[size, code_dim]`.
    pub ema_sums: Tensor<f32>,
    pub decay: f32,
    pub expire_threshold: f32,
    /// Input projection `[code_dim, dim]` and bias `[code_dim]`.
    pub w_in: Tensor<f32>,
    pub b_in: Tensor<f32>,
    /// Output projection `[dim, code_dim]` and bias `[dim]`.
    pub w_out: Tensor<f32>,
    pub b_out: Tensor<f32>,
}

/// Result of quantizing a block of rows.
#[derive(Clone, Debug)]
pub struct Quantized {
    pub codes: Vec<u32>,
    /// Projected inputs `[n, code_dim]`.
    pub z_e: Tensor<f32>,
    /// Chosen entries `[n, code_dim]`.
    pub e: Tensor<f32>,
    /// Output-projected entries `[n, dim]`.
    pub q: Tensor<f32>,
}

/// `x W^T + b` for `[n, in]` rows; the same kernel as the tape's `linear`.
fn affine(x: &[f32], w: &Tensor<f32>, b: &Tensor<f32>) -> Vec<f32> {
    let (nout, nin) = (w.dim(0), w.dim(1));
    let rows = x.len() / nin;
    let wt = transpose(w.data(), nout, nin);
    let mut out = Vec::with_capacity(rows * nout);
    for _ in 0..rows {
        out.extend_from_slice(b.data());
    }
    matmul_acc(x, &wt, &mut out, rows, nin, nout);
    out
}

/// Value `e`, gradient passed to `z_e` unchanged.
fn straight_through<'t>(z_e: Var<'t, f32>, e: Tensor<f32>) -> Var<'t, f32> {
    z_e.tape()
        .op(e, &[z_e], Box::new(|g, _| vec![Some(g.clone())]))
}

impl Codebook {
    /// Random projections (uniform, fan-in scaled) and unit-normal entries.
    pub fn new<R: Rng + ?Sized>(
        dim: usize,
        size: usize,
        code_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if size < 2 || dim == 0 || code_dim == 0 {
            return Err(Error::config(format!(
                "codebook needs size >= 2 and positive dims, got size {size}, dim {dim}, code_dim {code_dim}"
            )));
        }
        let bi = 1.0 / (dim as f64).sqrt();
        let bo = 1.0 / (code_dim as f64).sqrt();
        let entries = Tensor::randn(&[size, code_dim], 1.0, rng);
        Ok(Self {
            ema_sums: entries.clone(),
            entries,
            ema_counts: Tensor::ones(&[size]),
            decay: 0.99,
            expire_threshold: 0.01,
            w_in: Tensor::uniform(&[code_dim, dim], -bi, bi, rng),
            b_in: Tensor::zeros(&[code_dim]),
            w_out: Tensor::uniform(&[dim, code_dim], -bo, bo, rng),
            b_out: Tensor::zeros(&[dim]),
        })
    }

    /// Unfactorized codebook over `[size, dim]` entries: identity projections.
    pub fn with_entries(entries: Tensor<f32>) -> Result<Self> {
        if entries.ndim() != 2 || entries.dim(0) < 2 || entries.dim(1) == 0 {
            return Err(Error::config(format!(
                "codebook entries must be [size >= 2, dim], got {:?}",
                entries.shape()
            )));
        }
        let d = entries.dim(1);
        let mut eye = Tensor::zeros(&[d, d]);
        for i in 0..d {
            eye.data_mut()[i * d + i] = 1.0;
        }
        Ok(Self {
            ema_sums: entries.clone(),
            ema_counts: Tensor::ones(&[entries.dim(0)]),
            entries,
            decay: 0.99,
            expire_threshold: 0.01,
            w_in: eye.clone(),
            b_in: Tensor::zeros(&[d]),
            w_out: eye,
            b_out: Tensor::zeros(&[d]),
        })
    }

    pub fn size(&self) -> usize {
        self.entries.dim(0)
    }

    pub fn code_dim(&self) -> usize {
        self.entries.dim(1)
    }

    /// Input/output latent width.
    pub fn dim(&self) -> usize {
        self.w_in.dim(1)
    }

    pub fn validate(&self) -> Result<()> {
        let (s, k, d) = (self.size(), self.code_dim(), self.dim());
        if s < 2 {
            return Err(Error::config("codebook size must be at least 2"));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::config(format!(
                "EMA decay {} outside (0, 1)",
                self.decay
            )));
        }
        if !(self.expire_threshold >= 0.0) {
            return Err(Error::config("expire threshold must be nonnegative"));
        }
        let shapes_ok = self.ema_counts.shape() == [s]
            && self.ema_sums.shape() == [s, k]
            && self.w_in.shape() == [k, d]
            && self.b_in.shape() == [k]
            && self.w_out.shape() == [d, k]
            && self.b_out.shape() == [d];
        if !shapes_ok {
            return Err(Error::shape("codebook tensors have inconsistent shapes"));
        }
        if !self.entries.all_finite() {
            return Err(Error::config("codebook entries are not finite"));
        }
        if self.ema_counts.data().iter().any(|&c| !(c >= 0.0)) {
            return Err(Error::config("EMA counts must be nonnegative"));
        }
        Ok(())
    }

    fn check_rows(&self, rows: &[f32], width: usize) -> Result<usize> {
        if width == 0 || rows.len() % width != 0 {
            return Err(Error::shape(format!(
                "{} values are not rows of width {width}",
                rows.len()
            )));
        }
        Ok(rows.len() / width)
    }

    /// Projects `[n, dim]` rows into the code space.
    pub fn project(&self, rows: &[f32]) -> Result<Vec<f32>> {
        self.check_rows(rows, self.dim())?;
        Ok(affine(rows, &self.w_in, &self.b_in))
    }

    /// Maps `[n, code_dim]` code-space rows back to the latent space.
    pub fn unproject(&self, rows: &[f32]) -> Result<Vec<f32>> {
        self.check_rows(rows, self.code_dim())?;
        Ok(affine(rows, &self.w_out, &self.b_out))
    }

    /// Nearest entry to a code-space vector; ties resolve to the lowest index.
    pub fn nearest(&self, z_e: &[f32]) -> usize {
        nearest(z_e, self.entries.data(), self.code_dim()).0
    }

    pub fn entry(&self, code: usize) -> &[f32] {
        let k = self.code_dim();
        &self.entries.data()[code * k..(code + 1) * k]
    }

    /// Quantizes one latent vector.
    pub fn quantize(&self, v: &[f32]) -> Result<(usize, Vec<f32>)> {
        if v.len() != self.dim() {
            return Err(Error::shape(format!(
                "vector of {} values for a codebook of dim {}",
                v.len(),
                self.dim()
            )));
        }
        let z_e = self.project(v)?;
        let c = self.nearest(&z_e);
        Ok((c, self.unproject(self.entry(c))?))
    }

    /// Quantizes `[n, dim]` rows.
    pub fn quantize_rows(&self, z: &[f32]) -> Result<Quantized> {
        let n = self.check_rows(z, self.dim())?;
        let k = self.code_dim();
        let z_e = self.project(z)?;
        let codes: Vec<u32> = z_e
            .chunks_exact(k)
            .map(|r| self.nearest(r) as u32)
            .collect();
        let e: Vec<f32> = codes
            .iter()
            .flat_map(|&c| self.entry(c as usize).to_vec())
            .collect();
        let q = self.unproject(&e)?;
        Ok(Quantized {
            codes,
            z_e: Tensor::new(&[n, k], z_e)?,
            e: Tensor::new(&[n, k], e)?,
            q: Tensor::new(&[n, self.dim()], q)?,
        })
    }

    /// Latent vectors for `codes`, `[n, dim]`.
    pub fn decode(&self, codes: &[u32]) -> Result<Vec<f32>> {
        let mut e = Vec::with_capacity(codes.len() * self.code_dim());
        for &c in codes {
            if c as usize >= self.size() {
                return Err(Error::input(format!(
                    "code {c} out of range for codebook size {}",
                    self.size()
                )));
            }
            e.extend_from_slice(self.entry(c as usize));
        }
        self.unproject(&e)
    }

    /// Differentiable quantization of `[n, dim]` rows. Returns the
    /// output-projected entries (gradient reaches `z` straight through the
    /// lookup, and the projections normally) and the quantization result.
    pub fn forward_tape<'t>(
        &self,
        tape: &'t Tape<f32>,
        prefix: &str,
        z: Var<'t, f32>,
    ) -> Result<(Var<'t, f32>, Var<'t, f32>, Quantized)> {
        let w_in = tape.param(&join(prefix, "w_in"), &self.w_in);
        let b_in = tape.param(&join(prefix, "b_in"), &self.b_in);
        let w_out = tape.param(&join(prefix, "w_out"), &self.w_out);
        let b_out = tape.param(&join(prefix, "b_out"), &self.b_out);
        let z_e = z.linear(w_in, b_in)?;
        let zv = z_e.value();
        let k = self.code_dim();
        let codes: Vec<u32> = zv
            .data()
            .chunks_exact(k)
            .map(|r| self.nearest(r) as u32)
            .collect();
        let e: Vec<f32> = codes
            .iter()
            .flat_map(|&c| self.entry(c as usize).to_vec())
            .collect();
        let e = Tensor::new(zv.shape(), e)?;
        let commit = z_e.mse_to(&e)?;
        let q = straight_through(z_e, e.clone()).linear(w_out, b_out)?;
        let out = Quantized {
            codes,
            z_e: (*zv).clone(),
            e,
            q: (*q.value()).clone(),
        };
        Ok((q, commit, out))
    }

    /// EMA update from latent-space rows and their codes.
    pub fn ema_update(&mut self, z: &[f32], codes: &[u32]) -> Result<()> {
        let z_e = self.project(z)?;
        self.ema_update_projected(&z_e, codes)
    }

    /// EMA update from code-space rows:
    /// `count_i <- d count_i + (1-d) n_i`, `sum_i <- d sum_i + (1-d) S_i`,
    /// `entry_i <- sum_i / max(count_i, eps)`.
    pub fn ema_update_projected(&mut self, z_e: &[f32], codes: &[u32]) -> Result<()> {
        let k = self.code_dim();
        let n = self.check_rows(z_e, k)?;
        if n != codes.len() {
            return Err(Error::shape(format!("{n} rows but {} codes", codes.len())));
        }
        if n == 0 {
            return Ok(());
        }
        let s = self.size();
        let mut counts = vec![0.0f64; s];
        let mut sums = vec![0.0f64; s * k];
        for (r, &c) in z_e.chunks_exact(k).zip(codes) {
            let c = c as usize;
            if c >= s {
                return Err(Error::input(format!("code {c} out of range for size {s}")));
            }
            counts[c] += 1.0;
            for (a, &v) in sums[c * k..(c + 1) * k].iter_mut().zip(r) {
                *a += v as f64;
            }
        }
        let d = self.decay as f64;
        let ec = self.ema_counts.data_mut();
        for (c, &n) in ec.iter_mut().zip(&counts) {
            *c = (d * *c as f64 + (1.0 - d) * n) as f32;
        }
        let es = self.ema_sums.data_mut();
        for (a, &v) in es.iter_mut().zip(&sums) {
            *a = (d * *a as f64 + (1.0 - d) * v) as f32;
        }
        self.refresh_entries();
        Ok(())
    }

    fn refresh_entries(&mut self) {
        let k = self.code_dim();
        let counts = self.ema_counts.data().to_vec();
        let sums = self.ema_sums.data().to_vec();
        for (i, row) in self.entries.data_mut().chunks_exact_mut(k).enumerate() {
            let c = counts[i].max(EMA_EPS);
            for (e, &s) in row.iter_mut().zip(&sums[i * k..(i + 1) * k]) {
                *e = s / c;
            }
        }
    }

    /// Codes whose EMA count is below the expiration threshold.
    pub fn dead_codes(&self) -> Vec<usize> {
        self.ema_counts
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &c)| c < self.expire_threshold)
            .map(|(i, _)| i)
            .collect()
    }

    /// Overwrites one entry with the projection of latent vector `v` and
    /// resets its statistics to `(1, entry)`.
    pub fn replace(&mut self, code: usize, v: &[f32]) -> Result<()> {
        let z_e = self.project(v)?;
        let k = self.code_dim();
        self.entries.data_mut()[code * k..(code + 1) * k].copy_from_slice(&z_e);
        self.ema_sums.data_mut()[code * k..(code + 1) * k].copy_from_slice(&z_e);
        self.ema_counts.data_mut()[code] = 1.0;
        Ok(())
    }

    /// Replaces every expired entry with a uniformly drawn pool vector.
    pub fn expire_and_replace<R: Rng + ?Sized>(
        &mut self,
        pool: &DataPool,
        rng: &mut R,
    ) -> Result<usize> {
        if pool.is_empty() {
            return Err(Error::input("expiration needs a non-empty data pool"));
        }
        if pool.dim() != self.dim() {
            return Err(Error::shape(format!(
                "pool dim {} vs codebook dim {}",
                pool.dim(),
                self.dim()
            )));
        }
        let dead = self.dead_codes();
        for &c in &dead {
            let v = pool.sample(rng)?.to_vec();
            self.replace(c, &v)?;
        }
        Ok(dead.len())
    }

    /// Sets every entry to a k-means centroid of the projected `[n, dim]`
    /// samples, after at most `iters` Lloyd iterations.
    pub fn init_kmeans<R: Rng + ?Sized>(
        &mut self,
        samples: &[f32],
        iters: usize,
        rng: &mut R,
    ) -> Result<()> {
        let z_e = self.project(samples)?;
        let km = kmeans(&z_e, self.code_dim(), self.size(), iters, rng)?;
        self.entries = Tensor::new(self.entries.shape(), km.centroids)?;
        self.ema_sums = self.entries.clone();
        self.ema_counts = Tensor::ones(&[self.size()]);
        let codes: Vec<u32> = z_e
            .chunks_exact(self.code_dim())
            .map(|r| self.nearest(r) as u32)
            .collect();
        self.fit_output_projection(samples, &codes)
    }

    /// Least-squares fit of the output projection so that decoding `codes`
    /// reproduces the `[n, dim]` rows `samples` as closely as an affine map
    /// of the entries allows. A tiny ridge keeps the normal equations
    /// solvable with unused entry directions.
    pub fn fit_output_projection(&mut self, samples: &[f32], codes: &[u32]) -> Result<()> {
        let (k, d) = (self.code_dim(), self.dim());
        let n = self.check_rows(samples, d)?;
        if n != codes.len() || n == 0 {
            return Err(Error::shape(format!("{n} rows but {} codes", codes.len())));
        }
        // Augmented design rows [e, 1].
        let m = k + 1;
        let mut gram = vec![0.0f64; m * m];
        let mut rhs = vec![0.0f64; m * d];
        let mut a = vec![0.0f64; m];
        for (x, &c) in samples.chunks_exact(d).zip(codes) {
            for (ai, &v) in a.iter_mut().zip(self.entry(c as usize)) {
                *ai = v as f64;
            }
            a[k] = 1.0;
            for i in 0..m {
                for j in 0..m {
                    gram[i * m + j] += a[i] * a[j];
                }
                for (r, &xv) in rhs[i * d..(i + 1) * d].iter_mut().zip(x) {
                    *r += a[i] * xv as f64;
                }
            }
        }
        let ridge = 1e-9
            * (0..m)
                .map(|i| gram[i * m + i])
                .fold(0.0, f64::max)
                .max(1e-30);
        for i in 0..m {
            gram[i * m + i] += ridge;
        }
        let sol = solve_spd(&gram, &rhs, m, d)?;
        // sol is [m, d]: rows 0..k are W_out^T, row k is the bias.
        for o in 0..d {
            for i in 0..k {
                self.w_out.data_mut()[o * k + i] = sol[i * d + o] as f32;
            }
            self.b_out.data_mut()[o] = sol[k * d + o] as f32;
        }
        Ok(())
    }

    /// Every stored tensor, trainable or not, for checkpointing.
    pub fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<f32>)) {
        self.visit(prefix, f);
        f(&join(prefix, "entries"), &self.entries);
        f(&join(prefix, "ema_counts"), &self.ema_counts);
        f(&join(prefix, "ema_sums"), &self.ema_sums);
    }

    pub fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<f32>)) {
        self.visit_mut(prefix, f);
        f(&join(prefix, "entries"), &mut self.entries);
        f(&join(prefix, "ema_counts"), &mut self.ema_counts);
        f(&join(prefix, "ema_sums"), &mut self.ema_sums);
    }
}

/// Trainable tensors only: the projections. Entries learn by EMA.
impl Params<f32> for Codebook {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<f32>)) {
        f(&join(prefix, "w_in"), &self.w_in);
        f(&join(prefix, "b_in"), &self.b_in);
        f(&join(prefix, "w_out"), &self.w_out);
        f(&join(prefix, "b_out"), &self.b_out);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<f32>)) {
        f(&join(prefix, "w_in"), &mut self.w_in);
        f(&join(prefix, "b_in"), &mut self.b_in);
        f(&join(prefix, "w_out"), &mut self.w_out);
        f(&join(prefix, "b_out"), &mut self.b_out);
    }
}

/// Solves `A X = B` for symmetric positive definite `A` (`[m, m]`) and
/// `B` (`[m, d]`) by Cholesky factorization.
fn solve_spd(a: &[f64], b: &[f64], m: usize, d: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0f64; m * m];
    for i in 0..m {
        for j in 0..=i {
            let s: f64 = a[i * m + j] - (0..j).map(|p| l[i * m + p] * l[j * m + p]).sum::<f64>();
            if i == j {
                if !(s > 0.0) {
                    return Err(Error::input(
                        "least-squares system is not positive definite",
                    ));
                }
                l[i * m + i] = s.sqrt();
            } else {
                l[i * m + j] = s / l[j * m + j];
            }
        }
    }
    let mut x = b.to_vec();
    for c in 0..d {
        for i in 0..m {
            let s: f64 = (0..i).map(|p| l[i * m + p] * x[p * d + c]).sum();
            x[i * d + c] = (x[i * d + c] - s) / l[i * m + i];
        }
        for i in (0..m).rev() {
            let s: f64 = (i + 1..m).map(|p| l[p * m + i] * x[p * d + c]).sum();
            x[i * d + c] = (x[i * d + c] - s) / l[i * m + i];
        }
    }
    Ok(x)
}

/// k-means centroids of `[n, dim]` samples as an unfactorized codebook.
pub fn kmeans_init<R: Rng + ?Sized>(
    samples: &[f32],
    dim: usize,
    size: usize,
    iters: usize,
    rng: &mut R,
) -> Result<Codebook> {
    let km = kmeans(samples, dim, size, iters, rng)?;
    Codebook::with_entries(Tensor::new(&[size, dim], km.centroids)?)
}
