//! Lloyd's algorithm for codebook initialization.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct KMeans {
    /// `[k, dim]` row-major.
    pub centroids: Vec<f32>,
    /// Mean squared distance to the nearest centroid, before the first
    /// update and after every iteration.
    pub distortion: Vec<f64>,
    pub iterations: usize,
}

/// Index of the nearest row of `table` (`[n, dim]`); ties go to the lowest
/// index. Distances accumulate in f64 in ascending coordinate order.
pub(crate) fn nearest(v: &[f32], table: &[f32], dim: usize) -> (usize, f64) {
    if dim == 8 {
        return nearest8(v, table);
    }
    let q: Vec<f64> = v.iter().map(|&x| x as f64).collect();
    let mut best = (0, f64::INFINITY);
    for (i, row) in table.chunks_exact(dim).enumerate() {
        let mut d = 0.0f64;
        for (&e, &x) in row.iter().zip(&q) {
            let t = e as f64 - x;
            d += t * t;
        }
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Unrolled form of `nearest` for the default factorized width.
fn nearest8(v: &[f32], table: &[f32]) -> (usize, f64) {
    let q: [f64; 8] = std::array::from_fn(|j| v[j] as f64);
    let mut best = (0, f64::INFINITY);
    for (i, row) in table.chunks_exact(8).enumerate() {
        let r: [f64; 8] = std::array::from_fn(|j| row[j] as f64 - q[j]);
        let mut d = 0.0f64;
        for t in r {
            d += t * t;
        }
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Clusters `samples` (`[n, dim]`) into `k` centroids. Centroids start at
/// `k` distinct random samples; a cluster that empties is re-seeded from a
/// random sample. Stops early once assignments stop changing.
pub fn kmeans<R: Rng + ?Sized>(
    samples: &[f32],
    dim: usize,
    k: usize,
    iters: usize,
    rng: &mut R,
) -> Result<KMeans> {
    if dim == 0 || samples.len() % dim != 0 {
        return Err(Error::shape(format!(
            "{} values do not form rows of width {dim}",
            samples.len()
        )));
    }
    let n = samples.len() / dim;
    if n < k || k == 0 {
        return Err(Error::input(format!(
            "k-means needs at least {k} samples, got {n}"
        )));
    }
    let row = |i: usize| &samples[i * dim..(i + 1) * dim];
    let mut cent: Vec<f32> = sample(rng, n, k)
        .into_iter()
        .flat_map(|i| row(i).to_vec())
        .collect();
    let mut assign = vec![usize::MAX; n];

    let assign_all = |cent: &[f32], assign: &mut [usize]| -> (f64, bool) {
        let mut total = 0.0;
        let mut changed = false;
        for (i, a) in assign.iter_mut().enumerate() {
            let (j, d) = nearest(row(i), cent, dim);
            total += d;
            changed |= *a != j;
            *a = j;
        }
        (total / n as f64, changed)
    };

    let (d0, _) = assign_all(&cent, &mut assign);
    let mut distortion = vec![d0];
    let mut iterations = 0;
    for _ in 0..iters {
        iterations += 1;
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, &v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(row(i)) {
                *s += v as f64;
            }
        }
        for j in 0..k {
            let c = &mut cent[j * dim..(j + 1) * dim];
            if counts[j] == 0 {
                c.copy_from_slice(row(rng.random_range(0..n)));
            } else {
                for (c, s) in c.iter_mut().zip(&sums[j * dim..(j + 1) * dim]) {
                    *c = (*s / counts[j] as f64) as f32;
                }
            }
        }
        let (d, changed) = assign_all(&cent, &mut assign);
        distortion.push(d);
        if !changed {
            break;
        }
    }
    Ok(KMeans {
        centroids: cent,
        distortion,
        iterations,
    })
}
