//! Linear solves for hitting and absorption problems.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Band matrix stored row by row; entry `(i, j)` lives at
/// `i * (lower + upper + 1) + j + lower - i`.
#[derive(Debug, Clone)]
pub struct BandMatrix {
    n: usize,
    lower: usize,
    upper: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, lower: usize, upper: usize) -> Self {
        Self { n, lower, upper, data: vec![0.0; n * (lower + upper + 1)] }
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j + self.lower >= i && j <= i + self.upper);
        i * (self.lower + self.upper + 1) + j + self.lower - i
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if j + self.lower < i || j > i + self.upper {
            0.0
        } else {
            self.data[self.idx(i, j)]
        }
    }

    /// Gaussian elimination without pivoting; overwrites `rhs` with the
    /// solution. Stable for diagonally dominant M-matrices such as `I - Q`.
    pub fn solve(mut self, rhs: &mut [f64]) -> Result<()> {
        let n = self.n;
        assert_eq!(rhs.len(), n);
        for k in 0..n {
            let pivot = self.data[self.idx(k, k)];
            if !(pivot.abs() > 1e-300) {
                return Err(Error::Domain(format!("singular system at row {k}")));
            }
            let row_end = (k + self.upper + 1).min(n);
            for i in (k + 1)..(k + self.lower + 1).min(n) {
                let ik = self.idx(i, k);
                let factor = self.data[ik] / pivot;
                if factor == 0.0 {
                    continue;
                }
                self.data[ik] = 0.0;
                for j in (k + 1)..row_end {
                    let kj = self.data[self.idx(k, j)];
                    let ij = self.idx(i, j);
                    self.data[ij] -= factor * kj;
                }
                rhs[i] -= factor * rhs[k];
            }
        }
        for k in (0..n).rev() {
            let mut s = rhs[k];
            for j in (k + 1)..(k + self.upper + 1).min(n) {
                s -= self.data[self.idx(k, j)] * rhs[j];
            }
            rhs[k] = s / self.data[self.idx(k, k)];
        }
        Ok(())
    }
}

/// Solves `A x = b` for `A` given as triplets `(row, col, value)`; duplicate
/// positions are summed. Narrow-band systems go through [`BandMatrix`],
/// others through a dense LU.
pub fn solve_triplets(n: usize, triplets: &[(usize, usize, f64)], b: &[f64]) -> Result<Vec<f64>> {
    let (mut lower, mut upper) = (0, 0);
    for &(i, j, _) in triplets {
        if i > j {
            lower = lower.max(i - j);
        } else {
            upper = upper.max(j - i);
        }
    }
    let mut x = b.to_vec();
    if n == 0 {
        return Ok(x);
    }
    if (lower + upper + 1) * (lower + upper + 1) < 4 * n {
        let mut m = BandMatrix::zeros(n, lower, upper);
        for &(i, j, v) in triplets {
            m.add(i, j, v);
        }
        m.solve(&mut x)?;
        Ok(x)
    } else {
        let mut m = DMatrix::<f64>::zeros(n, n);
        for &(i, j, v) in triplets {
            m[(i, j)] += v;
        }
        m.lu()
            .solve(&DVector::from_vec(x))
            .map(|v| v.as_slice().to_vec())
            .ok_or_else(|| Error::Domain("singular system".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn band_solve_matches_dense() {
        // Tridiagonal system from a reflected random walk.
        let n = 50;
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.2));
            if i > 0 {
                t.push((i, i - 1, -1.0));
            }
            if i + 1 < n {
                t.push((i, i + 1, -1.1));
            }
        }
        let b: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let x = solve_triplets(n, &t, &b).unwrap();
        let mut dense = DMatrix::<f64>::zeros(n, n);
        for &(i, j, v) in &t {
            dense[(i, j)] += v;
        }
        let y = dense.lu().solve(&DVector::from_vec(b.clone())).unwrap();
        for i in 0..n {
            assert!((x[i] - y[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn wide_systems_use_dense_path() {
        let t = vec![(0, 0, 2.0), (0, 2, 1.0), (1, 1, 1.0), (2, 0, 1.0), (2, 2, 3.0)];
        let x = solve_triplets(3, &t, &[3.0, 1.0, 4.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 1.0).abs() < 1e-12 && (x[2] - 1.0).abs() < 1e-12);
    }
}
