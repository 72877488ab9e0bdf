//! Ring buffer of past latent vectors used as replacement candidates for
//! expired codes. Vectors are stored before the factorizing projection so
//! they stay usable as the projection trains.

use rand::Rng;

use crate::error::{Error, Result};

/// Minimum pool capacity.
pub const MIN_POOL_CAPACITY: usize = 32768;

#[derive(Clone, Debug)]
pub struct DataPool {
    dim: usize,
    capacity: usize,
    data: Vec<f32>,
    /// Slot the next push overwrites once full.
    next: usize,
}

impl DataPool {
    pub fn new(dim: usize, capacity: usize) -> Result<Self> {
        if dim == 0 || capacity == 0 {
            return Err(Error::config("data pool needs positive dim and capacity"));
        }
        Ok(Self {
            dim,
            capacity,
            data: Vec::new(),
            next: 0,
        })
    }

    /// Capacity `max(32768, codebook_size)`.
    pub fn for_codebook(dim: usize, codebook_size: usize) -> Result<Self> {
        Self::new(dim, MIN_POOL_CAPACITY.max(codebook_size))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn clear(&mut self) {
        self.data.clear();
        self.next = 0;
    }

    /// Appends `[n, dim]` rows, overwriting the oldest once full.
    pub fn push_rows(&mut self, rows: &[f32]) -> Result<()> {
        if rows.len() % self.dim != 0 {
            return Err(Error::shape(format!(
                "{} values are not rows of width {}",
                rows.len(),
                self.dim
            )));
        }
        for r in rows.chunks_exact(self.dim) {
            if self.len() < self.capacity {
                self.data.extend_from_slice(r);
            } else {
                let o = self.next * self.dim;
                self.data[o..o + self.dim].copy_from_slice(r);
                self.next = (self.next + 1) % self.capacity;
            }
        }
        Ok(())
    }

    /// Uniform draw over the current contents.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<&[f32]> {
        if self.is_empty() {
            return Err(Error::input("cannot sample from an empty data pool"));
        }
        Ok(self.get(rng.random_range(0..self.len())))
    }
}
