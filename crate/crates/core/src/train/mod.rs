//! Toy-scale training: one clip crop per step, straight-through gradients
//! into the encoder, decoder and quantizer projections, then an EMA update
//! with expiration on every codebook that took part.

mod corpus;

pub use corpus::{multitone_clip, synthetic_multitone, Corpus};

use std::collections::HashMap;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{Codec, CodecConfig};
use crate::error::{Error, Result};
use crate::layers::Params;
use crate::losses::{
    expand, synthesize, total_loss, Discriminator, LossParts, LossWeights, MelLoss,
};
use crate::nn::{clip_grad_norm, Optimizer, OptimizerKind, Tape, Tensor, Var};
use crate::quantizer::RvqTape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    /// Spectral frames per step; a multiple of the model's time stride.
    pub batch_frames: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub weights: LossWeights,
    /// Joint gradient norm cap; 0 disables clipping.
    #[serde(default)]
    pub grad_clip: f64,
    /// Initialize codebooks by k-means on the initial encoder's latents of
    /// the whole corpus.
    #[serde(default)]
    pub kmeans_init: bool,
    /// Steps over which a code counts as used for the utilization figure.
    #[serde(default = "default_window")]
    pub utilization_window: usize,
}

fn default_window() -> usize {
    50
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_frames: 100,
            learning_rate: 1e-4,
            seed: 0,
            optimizer: OptimizerKind::AdamStyle,
            weights: LossWeights::default(),
            grad_clip: 0.0,
            kmeans_init: false,
            utilization_window: default_window(),
        }
    }
}

impl TrainConfig {
    /// Settings for the mini model on a minute of synthetic audio. The
    /// heavy spectral weight is what makes the waveform (phase) converge
    /// within a few hundred steps; the mel term alone only fits magnitudes.
    pub fn toy() -> Self {
        Self {
            learning_rate: 1e-3,
            weights: LossWeights {
                lambda_spec: 50.0,
                ..LossWeights::default()
            },
            grad_clip: 1.0,
            kmeans_init: true,
            ..Self::default()
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps must be at least 1"));
        }
        if self.batch_frames == 0 {
            return Err(Error::config("batch_frames must be at least 1"));
        }
        // Zero is accepted so a step can run as a pure evaluation.
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::config(format!(
                "learning rate {} is not usable",
                self.learning_rate
            )));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return Err(Error::config("grad_clip must be finite and >= 0"));
        }
        if self.utilization_window == 0 {
            return Err(Error::config("utilization_window must be at least 1"));
        }
        self.weights.validate()
    }
}

/// Loss components and codebook usage after one step.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub step: usize,
    pub l_rec: f64,
    pub l_cmt: f64,
    pub l_spec: f64,
    pub l_adv: f64,
    pub l_feat: f64,
    pub total: f64,
    /// Mean over stages of the fraction of entries used within the
    /// utilization window.
    pub utilization: f64,
    pub n_active: usize,
    /// Entries replaced by expiration in this step.
    pub replaced: usize,
}

pub const CSV_HEADER: &str = "step,l_rec,l_cmt,total,utilization";

impl LossReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6}",
            self.step, self.l_rec, self.l_cmt, self.total, self.utilization
        )
    }
}

pub fn write_csv(reports: &[LossReport], w: &mut impl Write) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in reports {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

struct Forward<'t> {
    parts: LossParts<Var<'t, f32>>,
    rvq: RvqTape<'t>,
}

pub struct Trainer {
    pub codec: Codec,
    cfg: TrainConfig,
    opt: Optimizer<f32>,
    rng: ChaCha8Rng,
    mel: MelLoss,
    step: usize,
    /// When false, steps leave codebooks, pools and usage statistics alone.
    pub training: bool,
    discriminator: Option<Box<dyn Discriminator>>,
    /// Per stage and entry: one past the last step that emitted it.
    last_used: Vec<Vec<usize>>,
}

impl Trainer {
    pub fn new(codec_cfg: CodecConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let codec = Codec::new(codec_cfg, &mut rng)?;
        Self::from_codec(codec, cfg, rng)
    }

    /// Continues from existing weights. Optimizer moments start at zero.
    pub fn resume(codec: Codec, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Self::from_codec(codec, cfg, rng)
    }

    fn from_codec(codec: Codec, cfg: TrainConfig, rng: ChaCha8Rng) -> Result<Self> {
        let stride = codec.config().model.time_stride();
        if cfg.batch_frames % stride != 0 {
            return Err(Error::config(format!(
                "batch_frames {} is not a multiple of the time stride {stride}",
                cfg.batch_frames
            )));
        }
        let stft = codec.config().stft;
        Ok(Self {
            opt: Optimizer::new(cfg.optimizer, cfg.learning_rate as f32),
            mel: MelLoss::standard(stft.sample_rate)?,
            last_used: vec![vec![0; codec.rvq.codebook_size()]; codec.n_stages()],
            step: 0,
            training: true,
            discriminator: None,
            codec,
            cfg,
            rng,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn set_discriminator(&mut self, d: Box<dyn Discriminator>) {
        self.discriminator = Some(d);
    }

    /// Samples per training crop.
    pub fn batch_samples(&self) -> usize {
        self.cfg.batch_frames * self.codec.config().stft.hop
    }

    /// k-means initialization of every stage from the current encoder's
    /// latents over the whole corpus.
    pub fn init_codebooks(&mut self, corpus: &Corpus) -> Result<()> {
        let mut rows = Vec::new();
        let mut n = 0;
        let spf = self.codec.config().samples_per_frame();
        for clip in corpus.clips() {
            let usable = clip.len() / spf * spf;
            if usable == 0 {
                continue;
            }
            let x = self.codec.analyze(&clip[..usable])?;
            let z = self.codec.model.encoder.forward(&x)?;
            n += z.dim(0);
            rows.extend_from_slice(z.data());
        }
        let size = self.codec.rvq.codebook_size();
        if n < size {
            return Err(Error::input(format!(
                "k-means needs {size} latent frames, the corpus yields {n}"
            )));
        }
        let z = Tensor::new(&[n, self.codec.rvq.dim()], rows)?;
        self.codec.rvq.init_kmeans(&z, &mut self.rng)
    }

    fn check_clip(&self, audio: &[f64]) -> Result<()> {
        let spf = self.codec.config().samples_per_frame();
        if audio.is_empty() || audio.len() % spf != 0 {
            return Err(Error::input(format!(
                "training clips must be a positive multiple of {spf} samples, got {}",
                audio.len()
            )));
        }
        Ok(())
    }

    fn forward<'t>(
        &self,
        tape: &'t Tape<f32>,
        audio: &[f64],
        n_active: usize,
    ) -> Result<Forward<'t>> {
        let x = self.codec.analyze(audio)?;
        let xv = tape.constant(x.clone());
        let model = &self.codec.model;
        let z = model.encoder.forward_tape(tape, "encoder", xv)?;
        let rvq = self
            .codec
            .rvq
            .forward_tape(tape, "quantizer", z, n_active)?;
        let y = model.decoder.forward_tape(tape, "decoder", rvq.z_q)?;
        let spec = y.mse_to(&x)?;
        let cfg = self.codec.config();
        let audio_hat = synthesize(expand(y, cfg.coeff()?)?, &cfg.stft)?;
        let target = &audio[..audio_hat.value().len()];
        let rec = self.mel.loss(target, audio_hat)?;
        let zero = || tape.constant(Tensor::scalar(0.0f32));
        let (adv, feat) = match &self.discriminator {
            Some(d) => (
                d.adversarial(tape, target, audio_hat)?,
                d.feature_matching(tape, target, audio_hat)?,
            ),
            None => (zero(), zero()),
        };
        Ok(Forward {
            parts: LossParts {
                rec,
                adv,
                feat,
                cmt: rvq.commitment,
                spec,
            },
            rvq,
        })
    }

    fn report(
        &self,
        step: usize,
        p: &LossParts<Var<'_, f32>>,
        total: f64,
        n_active: usize,
        replaced: usize,
    ) -> LossReport {
        LossReport {
            step,
            l_rec: p.rec.item() as f64,
            l_cmt: p.cmt.item() as f64,
            l_spec: p.spec.item() as f64,
            l_adv: p.adv.item() as f64,
            l_feat: p.feat.item() as f64,
            total,
            utilization: self.utilization(),
            n_active,
            replaced,
        }
    }

    /// Losses on one clip with `n_active` stages and no state change.
    pub fn evaluate(&self, audio: &[f64], n_active: usize) -> Result<LossReport> {
        self.check_clip(audio)?;
        let tape = Tape::new();
        let f = self.forward(&tape, audio, n_active)?;
        let total = total_loss(&f.parts, &self.cfg.weights)?.item() as f64;
        Ok(self.report(self.step, &f.parts, total, n_active, 0))
    }

    /// Fraction of entries emitted within the utilization window, averaged
    /// over stages.
    pub fn utilization(&self) -> f64 {
        let since = self.step.saturating_sub(self.cfg.utilization_window);
        let per: f64 = self
            .last_used
            .iter()
            .map(|s| s.iter().filter(|&&u| u > since).count() as f64 / s.len() as f64)
            .sum();
        per / self.last_used.len() as f64
    }

    fn diverged(&self, what: &str) -> Error {
        Error::Diverged {
            step: self.step,
            what: what.to_string(),
        }
    }

    /// One optimization step on `audio`.
    pub fn train_step(&mut self, audio: &[f64]) -> Result<LossReport> {
        self.check_clip(audio)?;
        let n_active = if self.training {
            self.codec.rvq.sample_active(&mut self.rng)
        } else {
            self.codec.n_stages()
        };
        let tape = Tape::new();
        let f = self.forward(&tape, audio, n_active)?;
        for (name, v) in [
            ("l_rec", f.parts.rec),
            ("l_adv", f.parts.adv),
            ("l_feat", f.parts.feat),
            ("l_cmt", f.parts.cmt),
            ("l_spec", f.parts.spec),
        ] {
            if !v.item().is_finite() {
                return Err(self.diverged(name));
            }
        }
        let total = total_loss(&f.parts, &self.cfg.weights)?;
        let mut grads = tape.backward(total)?;

        let mut names = Vec::new();
        self.codec
            .model
            .visit("", &mut |n, _| names.push(n.to_string()));
        self.codec
            .rvq
            .visit("quantizer", &mut |n, _| names.push(n.to_string()));
        let mut named: Vec<(String, Tensor<f32>)> = names
            .into_iter()
            .filter_map(|n| grads.take_by_name(&n).map(|g| (n, g)))
            .collect();
        if named.iter().any(|(_, g)| !g.all_finite()) {
            return Err(self.diverged("gradient"));
        }
        if self.cfg.grad_clip > 0.0 {
            clip_grad_norm(&mut named, self.cfg.grad_clip as f32);
        }
        let named: HashMap<String, Tensor<f32>> = named.into_iter().collect();
        self.opt.begin_step();
        let opt = &mut self.opt;
        let mut apply = |n: &str, p: &mut Tensor<f32>| {
            if let Some(g) = named.get(n) {
                opt.update(n, p, g);
            }
        };
        self.codec.model.visit_mut("", &mut apply);
        self.codec.rvq.visit_mut("quantizer", &mut apply);
        self.codec.model.clamp_snake();

        let mut replaced = 0;
        if self.training {
            replaced = self.codec.rvq.update_codebooks(
                &f.rvq.stage_inputs,
                &f.rvq.stage_z_e,
                &f.rvq.codes,
                &mut self.rng,
            )?;
            for (s, codes) in f.rvq.codes.iter().enumerate() {
                for &c in codes {
                    self.last_used[s][c as usize] = self.step + 1;
                }
            }
        }
        let report = self.report(self.step, &f.parts, total.item() as f64, n_active, replaced);
        self.step += 1;
        Ok(report)
    }

    /// Draws a crop from the corpus and trains on it.
    pub fn step(&mut self, corpus: &Corpus) -> Result<LossReport> {
        let clip = corpus.sample(self.batch_samples(), &mut self.rng)?.to_vec();
        self.train_step(&clip)
    }

    /// Latent frames the corpus yields, whole clips only.
    pub fn latent_frames(&self, corpus: &Corpus) -> usize {
        let spf = self.codec.config().samples_per_frame();
        corpus.clips().iter().map(|c| c.len() / spf).sum()
    }

    /// Runs the configured number of steps from the current state. Before
    /// the first step, and only if enabled, codebooks are k-means
    /// initialized when the corpus has at least one latent frame per entry;
    /// smaller corpora keep the random initialization.
    pub fn run(
        &mut self,
        corpus: &Corpus,
        mut on_step: impl FnMut(&LossReport),
    ) -> Result<Vec<LossReport>> {
        if self.cfg.kmeans_init
            && self.step == 0
            && self.latent_frames(corpus) >= self.codec.rvq.codebook_size()
        {
            self.init_codebooks(corpus)?;
        }
        let mut out = Vec::with_capacity(self.cfg.steps);
        for _ in 0..self.cfg.steps {
            let r = self.step(corpus)?;
            on_step(&r);
            out.push(r);
        }
        Ok(out)
    }

    pub fn into_codec(self) -> Codec {
        self.codec
    }
}
