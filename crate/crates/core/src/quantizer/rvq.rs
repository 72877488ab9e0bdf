//! Residual stack of codebooks with quantization dropout. A single stage of
//! 32768 entries is the single-large-codebook system.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::codebook::Codebook;
use super::codes::{bits_per_code, CodeSequence};
use super::pool::DataPool;
use crate::error::{Error, Result};
use crate::layers::{join, Params};
use crate::nn::{sum_scalars, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizerConfig {
    pub n_stages: usize,
    pub codebook_size: usize,
    pub factorized_dim: usize,
    pub decay: f64,
    pub expire_threshold: f64,
    /// Probability that a training example uses a random number of stages.
    pub dropout_prob: f64,
    pub kmeans_iters: usize,
    /// Replace codes whose EMA count falls below the threshold.
    #[serde(default = "yes")]
    pub expiration: bool,
    /// Draw replacements from the long-horizon pool rather than the batch.
    #[serde(default = "yes")]
    pub data_pool: bool,
}

fn yes() -> bool {
    true
}

impl QuantizerConfig {
    /// 12 stages of 1024 entries.
    pub fn rvq() -> Self {
        Self {
            n_stages: 12,
            codebook_size: 1024,
            factorized_dim: 8,
            decay: 0.99,
            expire_threshold: 0.01,
            dropout_prob: 0.5,
            kmeans_iters: 50,
            expiration: true,
            data_pool: true,
        }
    }

    /// One stage of 32768 entries.
    pub fn single() -> Self {
        Self {
            n_stages: 1,
            codebook_size: 32768,
            dropout_prob: 0.0,
            ..Self::rvq()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "rvq" => Ok(Self::rvq()),
            "single" => Ok(Self::single()),
            other => Err(Error::config(format!("unknown quantizer preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_stages == 0 || self.n_stages > 255 {
            return Err(Error::config(format!(
                "n_stages {} outside 1..=255",
                self.n_stages
            )));
        }
        if self.codebook_size < 2 || self.codebook_size > u32::MAX as usize {
            return Err(Error::config(format!(
                "codebook_size {} too small",
                self.codebook_size
            )));
        }
        if self.factorized_dim == 0 {
            return Err(Error::config("factorized_dim must be positive"));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::config(format!(
                "decay {} outside (0, 1)",
                self.decay
            )));
        }
        if !(self.expire_threshold >= 0.0) || !(0.0..=1.0).contains(&self.dropout_prob) {
            return Err(Error::config(
                "expire_threshold must be >= 0 and dropout_prob in [0, 1]",
            ));
        }
        Ok(())
    }

    /// `n_stages * ceil(log2(size)) * frame_rate / 1000`.
    pub fn kbps(&self, frame_rate: usize, n_stages: usize) -> f64 {
        (n_stages as u64 * bits_per_code(self.codebook_size) as u64 * frame_rate as u64) as f64
            / 1000.0
    }
}

#[derive(Clone, Debug)]
pub struct RvqStack {
    pub cfg: QuantizerConfig,
    pub stages: Vec<Codebook>,
    /// Replacement candidates per stage (training state, not checkpointed).
    pub pools: Vec<DataPool>,
}

/// Batch quantization result.
#[derive(Clone, Debug)]
pub struct RvqEncoded {
    pub codes: CodeSequence,
    /// Sum of stage outputs `[n, dim]`.
    pub z_q: Tensor<f32>,
    /// `z - z_q`.
    pub residual: Tensor<f32>,
}

/// Differentiable quantization result plus what the codebook update needs.
pub struct RvqTape<'t> {
    pub z_q: Var<'t, f32>,
    /// Mean over active stages of the code-space commitment MSE.
    pub commitment: Var<'t, f32>,
    pub codes: Vec<Vec<u32>>,
    /// Residual entering each active stage, `[n, dim]`.
    pub stage_inputs: Vec<Tensor<f32>>,
    /// Its projection, `[n, code_dim]`.
    pub stage_z_e: Vec<Tensor<f32>>,
}

fn check_rows(z: &Tensor<f32>, dim: usize) -> Result<usize> {
    if z.ndim() != 2 || z.dim(1) != dim {
        return Err(Error::shape(format!(
            "quantizer expects [n, {dim}], got {:?}",
            z.shape()
        )));
    }
    Ok(z.dim(0))
}

impl RvqStack {
    pub fn new<R: Rng + ?Sized>(cfg: &QuantizerConfig, dim: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::with_capacity(cfg.n_stages);
        let mut pools = Vec::with_capacity(cfg.n_stages);
        for _ in 0..cfg.n_stages {
            let mut cb = Codebook::new(dim, cfg.codebook_size, cfg.factorized_dim, rng)?;
            cb.decay = cfg.decay as f32;
            cb.expire_threshold = cfg.expire_threshold as f32;
            stages.push(cb);
            pools.push(DataPool::for_codebook(dim, cfg.codebook_size)?);
        }
        Ok(Self {
            cfg: cfg.clone(),
            stages,
            pools,
        })
    }

    pub fn n_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn dim(&self) -> usize {
        self.stages[0].dim()
    }

    pub fn codebook_size(&self) -> usize {
        self.stages[0].size()
    }

    pub fn codebook_params(&self) -> usize {
        let mut n = 0;
        self.visit_state("", &mut |name, t| {
            if !name.ends_with("ema_counts") && !name.ends_with("ema_sums") {
                n += t.len();
            }
        });
        n
    }

    fn check_active(&self, n_active: usize) -> Result<()> {
        if n_active == 0 || n_active > self.n_stages() {
            return Err(Error::input(format!(
                "n_active {n_active} outside 1..={}",
                self.n_stages()
            )));
        }
        Ok(())
    }

    /// With probability `dropout_prob` a uniform draw from `1..=n_stages`,
    /// otherwise all stages.
    pub fn sample_active<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        if rng.random::<f64>() < self.cfg.dropout_prob {
            rng.random_range(1..=self.n_stages())
        } else {
            self.n_stages()
        }
    }

    /// Quantizes `[n, dim]` rows with the first `n_active` stages.
    pub fn encode(
        &self,
        z: &Tensor<f32>,
        n_active: usize,
        frame_rate: usize,
    ) -> Result<RvqEncoded> {
        self.check_active(n_active)?;
        let n = check_rows(z, self.dim())?;
        let mut residual = z.clone();
        let mut z_q = Tensor::zeros(&[n, self.dim()]);
        let mut per_stage = Vec::with_capacity(n_active);
        for cb in &self.stages[..n_active] {
            let q = cb.quantize_rows(residual.data())?;
            residual = residual.zip_map(&q.q, |a, b| a - b);
            z_q.add_assign(&q.q);
            per_stage.push(q.codes);
        }
        let codes = (0..n)
            .flat_map(|t| per_stage.iter().map(move |s| s[t]))
            .collect();
        Ok(RvqEncoded {
            codes: CodeSequence::new(codes, n_active, self.codebook_size(), frame_rate)?,
            residual: z.zip_map(&z_q, |a, b| a - b),
            z_q,
        })
    }

    /// Sum of the stage outputs selected by `codes`, `[n, dim]`.
    pub fn decode(&self, codes: &CodeSequence) -> Result<Tensor<f32>> {
        if codes.n_stages() > self.n_stages() || codes.codebook_size() != self.codebook_size() {
            return Err(Error::input(format!(
                "codes for {} stages of {} entries do not fit a {}x{} quantizer",
                codes.n_stages(),
                codes.codebook_size(),
                self.n_stages(),
                self.codebook_size()
            )));
        }
        let n = codes.frames();
        let mut z_q = Tensor::zeros(&[n, self.dim()]);
        for (s, cb) in self.stages[..codes.n_stages()].iter().enumerate() {
            let q = Tensor::new(&[n, self.dim()], cb.decode(&codes.stage(s))?)?;
            z_q.add_assign(&q);
        }
        Ok(z_q)
    }

    pub fn forward_tape<'t>(
        &self,
        tape: &'t Tape<f32>,
        prefix: &str,
        z: Var<'t, f32>,
        n_active: usize,
    ) -> Result<RvqTape<'t>> {
        self.check_active(n_active)?;
        check_rows(&z.value(), self.dim())?;
        let mut residual = z;
        let mut outs = Vec::with_capacity(n_active);
        let mut commits = Vec::with_capacity(n_active);
        let mut codes = Vec::with_capacity(n_active);
        let mut stage_inputs = Vec::with_capacity(n_active);
        let mut stage_z_e = Vec::with_capacity(n_active);
        for (i, cb) in self.stages[..n_active].iter().enumerate() {
            stage_inputs.push((*residual.value()).clone());
            let (q, commit, info) =
                cb.forward_tape(tape, &join(prefix, &format!("stages.{i}")), residual)?;
            residual = residual.sub(q)?;
            outs.push(q);
            commits.push(commit);
            codes.push(info.codes);
            stage_z_e.push(info.z_e);
        }
        let mut z_q = outs[0];
        for &q in &outs[1..] {
            z_q = z_q.add(q)?;
        }
        let commitment = sum_scalars(&commits)?.scale(1.0 / n_active as f32);
        Ok(RvqTape {
            z_q,
            commitment,
            codes,
            stage_inputs,
            stage_z_e,
        })
    }

    /// EMA update, pool refresh and expiration for every stage that took
    /// part in a forward pass. Returns the number of replaced entries.
    pub fn update_codebooks<R: Rng + ?Sized>(
        &mut self,
        stage_inputs: &[Tensor<f32>],
        stage_z_e: &[Tensor<f32>],
        codes: &[Vec<u32>],
        rng: &mut R,
    ) -> Result<usize> {
        let mut replaced = 0;
        for (s, ((x, z_e), c)) in stage_inputs.iter().zip(stage_z_e).zip(codes).enumerate() {
            let cb = &mut self.stages[s];
            cb.ema_update_projected(z_e.data(), c)?;
            if self.cfg.data_pool {
                self.pools[s].push_rows(x.data())?;
            }
            if self.cfg.expiration && !x.is_empty() {
                if self.cfg.data_pool {
                    replaced += cb.expire_and_replace(&self.pools[s], rng)?;
                } else {
                    let mut batch = DataPool::new(cb.dim(), x.dim(0))?;
                    batch.push_rows(x.data())?;
                    replaced += cb.expire_and_replace(&batch, rng)?;
                }
            }
        }
        Ok(replaced)
    }

    /// Initializes stage after stage by k-means on the residual left by the
    /// stages before it. Needs at least `codebook_size` rows.
    pub fn init_kmeans<R: Rng + ?Sized>(&mut self, z: &Tensor<f32>, rng: &mut R) -> Result<()> {
        check_rows(z, self.dim())?;
        let iters = self.cfg.kmeans_iters;
        let mut residual = z.clone();
        for cb in &mut self.stages {
            cb.init_kmeans(residual.data(), iters, rng)?;
            let q = cb.quantize_rows(residual.data())?;
            residual = residual.zip_map(&q.q, |a, b| a - b);
        }
        Ok(())
    }

    /// Every stored tensor, for checkpointing.
    pub fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<f32>)) {
        for (i, cb) in self.stages.iter().enumerate() {
            cb.visit_state(&join(prefix, &format!("stages.{i}")), f);
        }
    }

    pub fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<f32>)) {
        for (i, cb) in self.stages.iter_mut().enumerate() {
            cb.visit_state_mut(&join(prefix, &format!("stages.{i}")), f);
        }
    }
}

impl Params<f32> for RvqStack {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<f32>)) {
        for (i, cb) in self.stages.iter().enumerate() {
            cb.visit(&join(prefix, &format!("stages.{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<f32>)) {
        for (i, cb) in self.stages.iter_mut().enumerate() {
            cb.visit_mut(&join(prefix, &format!("stages.{i}")), f);
        }
    }
}

/// Mean squared error between `z` and the stop-gradient of `z_q`.
pub fn commitment_loss<'t, T: crate::nn::Real>(
    z: Var<'t, T>,
    z_q: &Tensor<T>,
) -> Result<Var<'t, T>> {
    z.mse_to(z_q)
}
