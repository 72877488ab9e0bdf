//! Audio in, codes out, and back: the front end, model and quantizer wired
//! into batch and streaming codecs, plus the `.sptk` bitstream and the
//! weights container.

mod bitstream;
mod checkpoint;
mod config;

pub use bitstream::{pack, unpack, Header, HEADER_LEN, MAGIC, VERSION};
pub use checkpoint::{Checkpoint, WEIGHTS_MAGIC, WEIGHTS_VERSION};
pub use config::{fnv1a64, CodecConfig};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::{compress_bins, expand_bins, stft_with, Complex64, CompressionCoeff, StftEngine};
use crate::dsp::{StreamingIstft, StreamingStft};
use crate::error::{Error, Result};
use crate::layers::Params;
use crate::model::{frames_to_input, output_to_frames, DecoderStream, EncoderStream, Model};
use crate::nn::Tensor;
use crate::quantizer::{CodeSequence, RvqStack};

/// A model with its quantizer and front end.
#[derive(Clone, Debug)]
pub struct Codec {
    cfg: CodecConfig,
    hash: u64,
    pub model: Model<f32>,
    pub rvq: RvqStack,
    engine: StftEngine,
    coeff: CompressionCoeff,
}

impl Codec {
    /// Freshly initialized weights.
    pub fn new<R: Rng + ?Sized>(cfg: CodecConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(&cfg.model, rng)?;
        let rvq = RvqStack::new(&cfg.quantizer, cfg.model.latent_dim, rng)?;
        Self::from_parts(cfg, model, rvq)
    }

    pub fn from_parts(cfg: CodecConfig, model: Model<f32>, rvq: RvqStack) -> Result<Self> {
        cfg.validate()?;
        if model.config() != &cfg.model || rvq.cfg != cfg.quantizer {
            return Err(Error::config(
                "model or quantizer was built for another config",
            ));
        }
        Ok(Self {
            hash: cfg.hash(),
            engine: StftEngine::new(cfg.stft)?,
            coeff: cfg.coeff()?,
            cfg,
            model,
            rvq,
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    pub fn config_hash(&self) -> u64 {
        self.hash
    }

    pub fn sample_rate(&self) -> u32 {
        self.cfg.stft.sample_rate
    }

    pub fn frame_rate(&self) -> usize {
        self.cfg.frame_rate()
    }

    pub fn n_stages(&self) -> usize {
        self.rvq.n_stages()
    }

    /// Samples an input sample must wait before its output is final.
    pub fn latency(&self) -> usize {
        self.model.latency(&self.cfg.stft)
    }

    pub fn kbps(&self, n_stages: usize) -> f64 {
        self.cfg.kbps(n_stages)
    }

    fn check_stages(&self, n_stages: usize) -> Result<()> {
        if n_stages == 0 || n_stages > self.n_stages() {
            return Err(Error::input(format!(
                "cannot use {n_stages} of {} stages",
                self.n_stages()
            )));
        }
        Ok(())
    }

    fn input_of(&self, frames: &mut [Vec<Complex64>]) -> Result<Tensor<f32>> {
        for fr in frames.iter_mut() {
            compress_bins(fr, self.coeff);
        }
        let refs: Vec<&[Complex64]> = frames.iter().map(|f| f.as_slice()).collect();
        frames_to_input(&refs, self.cfg.model.input_bins)
    }

    /// Network input `[2, T, input_bins]` for audio whose length is a
    /// multiple of `samples_per_frame`.
    pub fn analyze(&self, audio: &[f64]) -> Result<Tensor<f32>> {
        let spf = self.cfg.samples_per_frame();
        if audio.is_empty() || audio.len() % spf != 0 {
            return Err(Error::input(format!(
                "expected a positive multiple of {spf} samples, got {}",
                audio.len()
            )));
        }
        let spec = stft_with(&self.engine, audio)?;
        let mut frames: Vec<Vec<Complex64>> =
            (0..spec.frames()).map(|t| spec.frame(t).to_vec()).collect();
        self.input_of(&mut frames)
    }

    fn codes_of(&self, z: &Tensor<f32>, n_stages: usize) -> Result<CodeSequence> {
        if z.dim(0) == 0 {
            return CodeSequence::empty(n_stages, self.rvq.codebook_size(), self.frame_rate());
        }
        Ok(self.rvq.encode(z, n_stages, self.frame_rate())?.codes)
    }

    /// Whole-signal encode; trailing samples that do not complete a latent
    /// frame are dropped.
    pub fn encode(&self, audio: &[f64], n_stages: usize) -> Result<CodeSequence> {
        self.check_stages(n_stages)?;
        check_finite(audio)?;
        let spf = self.cfg.samples_per_frame();
        let usable = audio.len() / spf * spf;
        if usable == 0 {
            return CodeSequence::empty(n_stages, self.rvq.codebook_size(), self.frame_rate());
        }
        let spec = stft_with(&self.engine, &audio[..usable])?;
        let mut frames: Vec<Vec<Complex64>> =
            (0..spec.frames()).map(|t| spec.frame(t).to_vec()).collect();
        let x = self.input_of(&mut frames)?;
        let z = self.model.encoder.forward(&x)?;
        self.codes_of(&z, n_stages)
    }

    /// Whole-stream decode: `frames * samples_per_frame - left_pad` samples,
    /// sample `i` aligned with input sample `i`.
    pub fn decode(&self, codes: &CodeSequence) -> Result<Vec<f64>> {
        let mut st = self.decoder();
        st.push(codes)
    }

    /// Expands decoder output frames and overlap-adds them.
    fn synth_frames(
        &self,
        y: &Tensor<f32>,
        istft: &mut StreamingIstft,
        out: &mut Vec<f64>,
    ) -> Result<()> {
        let frames = output_to_frames(y, self.cfg.stft.freq_bins())?;
        for mut fr in frames {
            expand_bins(&mut fr, self.coeff);
            istft.push_frame(&fr, out);
        }
        Ok(())
    }

    pub fn encoder(&self) -> Result<StreamEncoder<'_>> {
        self.encoder_with(self.n_stages())
    }

    pub fn encoder_with(&self, n_stages: usize) -> Result<StreamEncoder<'_>> {
        self.check_stages(n_stages)?;
        Ok(StreamEncoder {
            codec: self,
            n_stages,
            stft: StreamingStft::new(self.engine.clone())?,
            model: self.model.encoder.stream()?,
            frames_emitted: 0,
            poisoned: false,
        })
    }

    pub fn decoder(&self) -> StreamDecoder<'_> {
        StreamDecoder {
            codec: self,
            istft: StreamingIstft::new(self.engine.clone()),
            model: self.model.decoder.stream().expect("validated config"),
            frames_emitted: 0,
            poisoned: false,
        }
    }

    /// Every stored tensor: network weights under `encoder.` / `decoder.`,
    /// quantizer state under `quantizer.`.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors = Vec::new();
        self.model
            .visit("", &mut |n, t| tensors.push((n.to_string(), t.clone())));
        self.rvq.visit_state("quantizer", &mut |n, t| {
            tensors.push((n.to_string(), t.clone()))
        });
        Checkpoint {
            config: self.cfg.clone(),
            tensors,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        // Structure comes from the config; every value is then overwritten.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut codec = Self::new(ck.config.clone(), &mut rng)?;
        let mut missing = Vec::new();
        let mut fill = |name: &str, t: &mut Tensor<f32>| match ck.get(name) {
            Some(src) if src.shape() == t.shape() => *t = src.clone(),
            Some(src) => missing.push(format!(
                "{name} (shape {:?}, expected {:?})",
                src.shape(),
                t.shape()
            )),
            None => missing.push(name.to_string()),
        };
        codec.model.visit_mut("", &mut fill);
        codec.rvq.visit_state_mut("quantizer", &mut fill);
        if !missing.is_empty() {
            return Err(Error::Checkpoint(format!(
                "missing or mismatched: {}",
                missing.join(", ")
            )));
        }
        let expected = codec.checkpoint().tensors.len();
        if ck.tensors.len() != expected {
            return Err(Error::Checkpoint(format!(
                "{} tensors stored, config needs {expected}",
                ck.tensors.len()
            )));
        }
        for cb in &codec.rvq.stages {
            cb.validate()?;
        }
        Ok(codec)
    }

    /// Packs codes with this codec's sample rate and config hash.
    pub fn pack(&self, codes: &CodeSequence) -> Result<Vec<u8>> {
        pack(codes, self.sample_rate(), self.hash)
    }

    /// Unpacks a stream and checks it was produced by a compatible codec.
    pub fn unpack(&self, bytes: &[u8]) -> Result<CodeSequence> {
        let (h, codes) = unpack(bytes)?;
        if h.config_hash != self.hash {
            return Err(Error::HashMismatch {
                expected: h.config_hash,
                found: self.hash,
            });
        }
        if h.sample_rate != self.sample_rate()
            || h.frame_rate as usize != self.frame_rate()
            || h.codebook_size as usize != self.rvq.codebook_size()
            || h.n_stages as usize > self.n_stages()
        {
            return Err(Error::Bitstream(format!(
                "header {h:?} does not match the codec"
            )));
        }
        Ok(codes)
    }
}

fn check_finite(audio: &[f64]) -> Result<()> {
    match audio.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::input(format!("non-finite sample at index {i}"))),
        None => Ok(()),
    }
}

/// Incremental encoder. Any chunking of the input yields the same codes as
/// [`Codec::encode`] on the concatenation.
pub struct StreamEncoder<'c> {
    codec: &'c Codec,
    n_stages: usize,
    stft: StreamingStft,
    model: EncoderStream<f32>,
    frames_emitted: usize,
    poisoned: bool,
}

impl StreamEncoder<'_> {
    pub fn push(&mut self, chunk: &[f64]) -> Result<CodeSequence> {
        if self.poisoned {
            return Err(Error::Poisoned);
        }
        let res = self.push_inner(chunk);
        if res.is_err() {
            self.poisoned = true;
        }
        res
    }

    fn push_inner(&mut self, chunk: &[f64]) -> Result<CodeSequence> {
        check_finite(chunk)?;
        let c = self.codec;
        let mut frames = self.stft.push(chunk);
        if frames.is_empty() {
            return CodeSequence::empty(self.n_stages, c.rvq.codebook_size(), c.frame_rate());
        }
        let x = c.input_of(&mut frames)?;
        let z = c.model.encoder.push(&mut self.model, &x)?;
        let codes = c.codes_of(&z, self.n_stages)?;
        self.frames_emitted += codes.frames();
        Ok(codes)
    }

    pub fn frames_emitted(&self) -> usize {
        self.frames_emitted
    }

    pub fn is_poisoned(&self) -> bool {
        self.poisoned
    }

    /// Values carried between pushes by the network layers.
    pub fn state_len(&self) -> usize {
        self.model.state_len()
    }

    /// Returns to the state of a fresh stream.
    pub fn reset(&mut self) -> Result<()> {
        self.stft.reset();
        self.model = self.codec.model.encoder.stream()?;
        self.frames_emitted = 0;
        self.poisoned = false;
        Ok(())
    }
}

/// Incremental decoder. Output equals [`Codec::decode`] on the
/// concatenated codes.
pub struct StreamDecoder<'c> {
    codec: &'c Codec,
    istft: StreamingIstft,
    model: DecoderStream<f32>,
    frames_emitted: usize,
    poisoned: bool,
}

impl StreamDecoder<'_> {
    pub fn push(&mut self, codes: &CodeSequence) -> Result<Vec<f64>> {
        if self.poisoned {
            return Err(Error::Poisoned);
        }
        let c = self.codec;
        // Validation happens before any state changes.
        let z = c.rvq.decode(codes)?;
        if codes.frames() == 0 {
            return Ok(Vec::new());
        }
        let res = (|| {
            let y = c.model.decoder.push(&mut self.model, &z)?;
            let mut out = Vec::with_capacity(y.dim(1) * c.cfg.stft.hop);
            c.synth_frames(&y, &mut self.istft, &mut out)?;
            Ok(out)
        })();
        match res {
            Ok(out) => {
                self.frames_emitted += codes.frames();
                Ok(out)
            }
            Err(e) => {
                self.poisoned = true;
                Err(e)
            }
        }
    }

    pub fn frames_emitted(&self) -> usize {
        self.frames_emitted
    }

    pub fn is_poisoned(&self) -> bool {
        self.poisoned
    }

    pub fn state_len(&self) -> usize {
        self.model.state_len()
    }

    pub fn reset(&mut self) {
        self.istft.reset();
        self.model = self.codec.model.decoder.stream().expect("validated config");
        self.frames_emitted = 0;
        self.poisoned = false;
    }
}
