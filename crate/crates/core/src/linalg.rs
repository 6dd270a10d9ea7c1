//! Banded LU without pivoting for the diagonally dominant systems produced by
//! the finite-difference solvers.

use crate::{Error, Result};

/// Square band matrix stored row by row; entry `(i, j)` with
/// `i - lower <= j <= i + upper` lives at `i * width + (j + lower - i)`.
#[derive(Debug, Clone)]
pub struct BandMatrix {
    n: usize,
    lower: usize,
    upper: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, lower: usize, upper: usize) -> Self {
        BandMatrix {
            n,
            lower,
            upper,
            data: vec![0.0; n * (lower + upper + 1)],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    fn width(&self) -> usize {
        self.lower + self.upper + 1
    }

    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j + self.lower >= i && j <= i + self.upper, "({i},{j}) outside band");
        i * self.width() + (j + self.lower - i)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if j + self.lower < i || j > i + self.upper {
            0.0
        } else {
            self.data[self.idx(i, j)]
        }
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.data[k] = v;
    }

    /// Replaces row `i` by the identity row.
    pub fn set_identity_row(&mut self, i: usize) {
        let w = self.width();
        for v in &mut self.data[i * w..(i + 1) * w] {
            *v = 0.0;
        }
        self.set(i, i, 1.0);
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        let w = self.width();
        for i in 0..self.n {
            let j0 = i.saturating_sub(self.lower);
            let j1 = (i + self.upper).min(self.n - 1);
            let row = &self.data[i * w..(i + 1) * w];
            let mut s = 0.0;
            for j in j0..=j1 {
                s += row[j + self.lower - i] * x[j];
            }
            y[i] = s;
        }
    }

    /// Dot product of row `i` with `x`.
    pub fn row_dot(&self, i: usize, x: &[f64]) -> f64 {
        let j0 = i.saturating_sub(self.lower);
        let j1 = (i + self.upper).min(self.n - 1);
        (j0..=j1).map(|j| self.get(i, j) * x[j]).sum()
    }

    /// In-place Doolittle factorization. Fails on a vanishing pivot.
    pub fn factor(mut self) -> Result<BandLu> {
        let w = self.width();
        let (kl, ku) = (self.lower, self.upper);
        for k in 0..self.n {
            let pivot = self.data[k * w + kl];
            if pivot.abs() < 1e-300 || !pivot.is_finite() {
                return Err(Error::NonConvergence {
                    solver: "band-lu",
                    iterations: k,
                    last_change: pivot,
                });
            }
            let iend = (k + kl).min(self.n - 1);
            let jend = (k + ku).min(self.n - 1);
            for i in k + 1..=iend {
                let lik_idx = i * w + (k + kl - i);
                let lik = self.data[lik_idx] / pivot;
                self.data[lik_idx] = lik;
                if lik == 0.0 {
                    continue;
                }
                let (head, tail) = self.data.split_at_mut(i * w);
                let src = &head[k * w..k * w + w];
                let dst = &mut tail[..w];
                for j in k + 1..=jend {
                    dst[j + kl - i] -= lik * src[j + kl - k];
                }
            }
        }
        Ok(BandLu { m: self })
    }
}

/// Factored band matrix.
#[derive(Debug, Clone)]
pub struct BandLu {
    m: BandMatrix,
}

impl BandLu {
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let m = &self.m;
        let w = m.width();
        let kl = m.lower;
        for i in 0..m.n {
            let row = &m.data[i * w..(i + 1) * w];
            let mut s = b[i];
            for j in i.saturating_sub(kl)..i {
                s -= row[j + kl - i] * b[j];
            }
            b[i] = s;
        }
        for i in (0..m.n).rev() {
            let row = &m.data[i * w..(i + 1) * w];
            let mut s = b[i];
            let jend = (i + m.upper).min(m.n - 1);
            for j in i + 1..=jend {
                s -= row[j + kl - i] * b[j];
            }
            b[i] = s / row[kl];
        }
    }
}
