use crate::error::{Error, Result};

/// Code indices, `[frames, n_stages]` row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeSequence {
    codes: Vec<u32>,
    n_stages: usize,
    codebook_size: usize,
    frame_rate: usize,
}

/// Bits needed per code: `ceil(log2(size))`.
pub fn bits_per_code(size: usize) -> u32 {
    if size <= 1 {
        0
    } else {
        usize::BITS - (size - 1).leading_zeros()
    }
}

/// Fraction of the codebook used per stage, and their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct Utilization {
    pub per_stage: Vec<f64>,
    pub mean: f64,
}

impl CodeSequence {
    pub fn new(
        codes: Vec<u32>,
        n_stages: usize,
        codebook_size: usize,
        frame_rate: usize,
    ) -> Result<Self> {
        if n_stages == 0 || codebook_size < 2 {
            return Err(Error::input(format!(
                "code sequence needs n_stages >= 1 and size >= 2, got {n_stages} and {codebook_size}"
            )));
        }
        if codes.len() % n_stages != 0 {
            return Err(Error::shape(format!(
                "{} codes do not divide into {n_stages} stages",
                codes.len()
            )));
        }
        if let Some(&c) = codes.iter().find(|&&c| c as usize >= codebook_size) {
            return Err(Error::input(format!(
                "code {c} out of range for size {codebook_size}"
            )));
        }
        Ok(Self {
            codes,
            n_stages,
            codebook_size,
            frame_rate,
        })
    }

    pub fn empty(n_stages: usize, codebook_size: usize, frame_rate: usize) -> Result<Self> {
        Self::new(Vec::new(), n_stages, codebook_size, frame_rate)
    }

    pub fn frames(&self) -> usize {
        self.codes.len() / self.n_stages
    }

    pub fn n_stages(&self) -> usize {
        self.n_stages
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    pub fn frame_rate(&self) -> usize {
        self.frame_rate
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.codes
    }

    pub fn get(&self, frame: usize, stage: usize) -> u32 {
        self.codes[frame * self.n_stages + stage]
    }

    pub fn frame(&self, t: usize) -> &[u32] {
        &self.codes[t * self.n_stages..(t + 1) * self.n_stages]
    }

    /// Codes of one stage across all frames.
    pub fn stage(&self, s: usize) -> Vec<u32> {
        (0..self.frames()).map(|t| self.get(t, s)).collect()
    }

    /// Frames `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            codes: self.codes[start * self.n_stages..end * self.n_stages].to_vec(),
            ..*self
        }
    }

    /// Appends the frames of `other`, which must share the layout.
    pub fn extend(&mut self, other: &CodeSequence) -> Result<()> {
        if other.n_stages != self.n_stages || other.codebook_size != self.codebook_size {
            return Err(Error::shape(format!(
                "cannot append {}x{} codes to {}x{}",
                other.n_stages, other.codebook_size, self.n_stages, self.codebook_size
            )));
        }
        self.codes.extend_from_slice(&other.codes);
        Ok(())
    }

    /// Keeps the first `n` stages of every frame.
    pub fn truncate_stages(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.n_stages {
            return Err(Error::input(format!(
                "cannot keep {n} of {} stages",
                self.n_stages
            )));
        }
        let codes = (0..self.frames())
            .flat_map(|t| self.frame(t)[..n].to_vec())
            .collect();
        Self::new(codes, n, self.codebook_size, self.frame_rate)
    }

    pub fn bits_per_code(&self) -> u32 {
        bits_per_code(self.codebook_size)
    }

    /// `n_stages * bits * frame_rate / 1000`.
    pub fn kbps(&self) -> f64 {
        (self.n_stages as u64 * self.bits_per_code() as u64 * self.frame_rate as u64) as f64
            / 1000.0
    }
}

/// Distinct codes used per stage over `size` entries.
pub fn utilization(codes: &CodeSequence, size: usize) -> Utilization {
    let per_stage: Vec<f64> = (0..codes.n_stages())
        .map(|s| {
            let mut seen = vec![false; size];
            for t in 0..codes.frames() {
                if let Some(v) = seen.get_mut(codes.get(t, s) as usize) {
                    *v = true;
                }
            }
            seen.iter().filter(|&&b| b).count() as f64 / size as f64
        })
        .collect();
    let mean = if per_stage.is_empty() {
        0.0
    } else {
        per_stage.iter().sum::<f64>() / per_stage.len() as f64
    };
    Utilization { per_stage, mean }
}
