//! Index map shared by strided and transposed convolution.
//!
//! A column `(c, a, b; i, j)` addresses grid cell
//! `(c, st*i + a - t_off, sf*j + b - f_off)`; cells outside the grid read as
//! zero and swallow writes.

use crate::nn::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Geom {
    pub ch: usize,
    pub grid_t: usize,
    pub grid_f: usize,
    pub kt: usize,
    pub kf: usize,
    pub st: usize,
    pub sf: usize,
    pub t_off: usize,
    pub f_off: usize,
    pub col_t: usize,
    pub col_f: usize,
}

impl Geom {
    pub fn rows(&self) -> usize {
        self.ch * self.kt * self.kf
    }

    pub fn cols(&self) -> usize {
        self.col_t * self.col_f
    }

    #[inline]
    fn grid_index(pos: usize, off: usize, len: usize) -> Option<usize> {
        pos.checked_sub(off).filter(|&p| p < len)
    }

    /// Valid `j` range for frequency tap `b`.
    fn j_range(&self, b: usize) -> (usize, usize) {
        let mut lo = 0;
        while lo < self.col_f
            && Self::grid_index(self.sf * lo + b, self.f_off, self.grid_f).is_none()
        {
            lo += 1;
        }
        let mut hi = lo;
        while hi < self.col_f
            && Self::grid_index(self.sf * hi + b, self.f_off, self.grid_f).is_some()
        {
            hi += 1;
        }
        (lo, hi)
    }

    /// Gathers grid values into a `[rows, cols]` matrix.
    pub fn im2col<T: Real>(&self, grid: &[T]) -> Vec<T> {
        debug_assert_eq!(grid.len(), self.ch * self.grid_t * self.grid_f);
        let ncols = self.cols();
        let mut out = vec![T::zero(); self.rows() * ncols];
        for c in 0..self.ch {
            let plane = &grid[c * self.grid_t * self.grid_f..(c + 1) * self.grid_t * self.grid_f];
            for a in 0..self.kt {
                for b in 0..self.kf {
                    let row = (c * self.kt + a) * self.kf + b;
                    let dst = &mut out[row * ncols..(row + 1) * ncols];
                    let (jlo, jhi) = self.j_range(b);
                    for i in 0..self.col_t {
                        let Some(t) = Self::grid_index(self.st * i + a, self.t_off, self.grid_t)
                        else {
                            continue;
                        };
                        let src = &plane[t * self.grid_f..(t + 1) * self.grid_f];
                        let d = &mut dst[i * self.col_f..(i + 1) * self.col_f];
                        for j in jlo..jhi {
                            d[j] = src[self.sf * j + b - self.f_off];
                        }
                    }
                }
            }
        }
        out
    }

    /// Scatter-adds a `[rows, cols]` matrix onto the grid. Each grid cell
    /// receives its contributions in ascending `(a, b)` order.
    pub fn col2im<T: Real>(&self, cols: &[T], grid: &mut [T]) {
        debug_assert_eq!(cols.len(), self.rows() * self.cols());
        let ncols = self.cols();
        for c in 0..self.ch {
            let plane =
                &mut grid[c * self.grid_t * self.grid_f..(c + 1) * self.grid_t * self.grid_f];
            for a in 0..self.kt {
                for b in 0..self.kf {
                    let row = (c * self.kt + a) * self.kf + b;
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    let (jlo, jhi) = self.j_range(b);
                    for i in 0..self.col_t {
                        let Some(t) = Self::grid_index(self.st * i + a, self.t_off, self.grid_t)
                        else {
                            continue;
                        };
                        let dst = &mut plane[t * self.grid_f..(t + 1) * self.grid_f];
                        let s = &src[i * self.col_f..(i + 1) * self.col_f];
                        for j in jlo..jhi {
                            dst[self.sf * j + b - self.f_off] += s[j];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_and_col2im_are_adjoint() {
        let g = Geom {
            ch: 2,
            grid_t: 5,
            grid_f: 9,
            kt: 3,
            kf: 3,
            st: 2,
            sf: 2,
            t_off: 1,
            f_off: 1,
            col_t: 3,
            col_f: 5,
        };
        let grid: Vec<f64> = (0..g.ch * g.grid_t * g.grid_f)
            .map(|i| (i as f64).sin())
            .collect();
        let cols: Vec<f64> = (0..g.rows() * g.cols())
            .map(|i| (i as f64 * 0.7).cos())
            .collect();
        let lhs: f64 = g.im2col(&grid).iter().zip(&cols).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; grid.len()];
        g.col2im(&cols, &mut back);
        let rhs: f64 = grid.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
