//! Dense complex matrices.
//!
//! Storage is row-major. The kernels here are written for the matrix sizes a
//! `L ≤ 14` spin chain produces (up to `16384 × 16384`) and stay
//! single-threaded; callers parallelise over independent matrices.

mod eigh;
mod unitary;

use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Index, IndexMut};

use num_complex::Complex64 as C64;

pub use eigh::{eigh, eigvalsh, HermitianEigen};
pub use unitary::{diagonalize_unitary, UnitaryEigen};

const ZERO: C64 = C64::new(0.0, 0.0);
const ONE: C64 = C64::new(1.0, 0.0);

#[derive(Clone, Debug, PartialEq)]
pub struct CMatrix {
    rows: usize,
    cols: usize,
    data: Vec<C64>,
}

impl CMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        CMatrix {
            rows,
            cols,
            data: vec![ZERO; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = ONE;
        }
        m
    }

    pub fn from_diagonal(diag: &[C64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, d) in diag.iter().enumerate() {
            m[(i, i)] = *d;
        }
        m
    }

    pub fn from_real_diagonal(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, d) in diag.iter().enumerate() {
            m[(i, i)] = C64::new(*d, 0.0);
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        CMatrix { rows, cols, data }
    }

    /// Wraps row-major data.
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<C64>) -> Self {
        assert_eq!(data.len(), rows * cols, "row-major data has wrong length");
        CMatrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[C64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [C64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<C64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn diagonal(&self) -> Vec<C64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn adjoint(&self) -> CMatrix {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for (c, v) in self.row(r).iter().enumerate() {
                out.data[c * self.rows + r] = v.conj();
            }
        }
        out
    }

    pub fn scale(&self, factor: C64) -> CMatrix {
        CMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    /// `self + factor · other`.
    pub fn add_scaled(&self, factor: C64, other: &CMatrix) -> CMatrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        CMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + factor * b)
                .collect(),
        }
    }

    pub fn matmul(&self, rhs: &CMatrix) -> CMatrix {
        assert_eq!(self.cols, rhs.rows, "inner dimensions differ");
        let mut out = Self::zeros(self.rows, rhs.cols);
        gemm(
            &self.data,
            &rhs.data,
            &mut out.data,
            self.rows,
            self.cols,
            rhs.cols,
        );
        out
    }

    /// `self · x`.
    pub fn matvec(&self, x: &[C64]) -> Vec<C64> {
        let mut out = vec![ZERO; self.rows];
        self.matvec_into(x, &mut out);
        out
    }

    pub fn matvec_into(&self, x: &[C64], out: &mut [C64]) {
        assert_eq!(x.len(), self.cols);
        assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(r), x);
        }
    }

    /// `self† · x`.
    pub fn adjoint_matvec(&self, x: &[C64]) -> Vec<C64> {
        assert_eq!(x.len(), self.rows);
        let mut out = vec![ZERO; self.cols];
        for (r, xr) in x.iter().enumerate() {
            if *xr == ZERO {
                continue;
            }
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v.conj() * xr;
            }
        }
        out
    }

    /// `[self, other] = self·other − other·self`.
    pub fn commutator(&self, other: &CMatrix) -> CMatrix {
        let ab = self.matmul(other);
        let ba = other.matmul(self);
        ab.add_scaled(C64::new(-1.0, 0.0), &ba)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, other: &CMatrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    /// `max |H − H†|`.
    pub fn hermiticity_defect(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        let mut defect = 0.0f64;
        for r in 0..self.rows {
            for c in r..self.cols {
                defect = defect.max((self[(r, c)] - self[(c, r)].conj()).norm());
            }
        }
        defect
    }

    /// `max |U†U − I|`.
    pub fn unitarity_defect(&self) -> f64 {
        let gram = self.adjoint().matmul(self);
        gram.max_abs_diff(&Self::identity(self.cols))
    }

    /// One Newton–Schulz step towards the closest unitary,
    /// `X ← X (3I − X†X) / 2`. Converges quadratically for near-unitary `X`.
    pub fn newton_schulz_step(&self) -> CMatrix {
        let gram = self.adjoint().matmul(self);
        let correction =
            CMatrix::identity(self.cols).scale(C64::new(1.5, 0.0)).add_scaled(C64::new(-0.5, 0.0), &gram);
        self.matmul(&correction)
    }
}

impl Index<(usize, usize)> for CMatrix {
    type Output = C64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &C64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for CMatrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut C64 {
        &mut self.data[r * self.cols + c]
    }
}

#[inline]
pub(crate) fn dot(a: &[C64], b: &[C64]) -> C64 {
    let (mut re, mut im) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        re += x.re * y.re - x.im * y.im;
        im += x.re * y.im + x.im * y.re;
    }
    C64::new(re, im)
}

/// `Σ conj(a_i) b_i`.
#[inline]
pub(crate) fn dot_conj(a: &[C64], b: &[C64]) -> C64 {
    let (mut re, mut im) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        re += x.re * y.re + x.im * y.im;
        im += x.re * y.im - x.im * y.re;
    }
    C64::new(re, im)
}

/// `c += a · b` for row-major `a: m×k`, `b: k×n`, `c: m×n`, tiled so a
/// `KB × NB` panel of `b` stays cache resident.
fn gemm(a: &[C64], b: &[C64], c: &mut [C64], m: usize, k: usize, n: usize) {
    const KB: usize = 64;
    const NB: usize = 256;
    for jj in (0..n).step_by(NB) {
        let jend = (jj + NB).min(n);
        for kk in (0..k).step_by(KB) {
            let kend = (kk + KB).min(k);
            for i in 0..m {
                let arow = &a[i * k + kk..i * k + kend];
                let crow = &mut c[i * n + jj..i * n + jend];
                for (p, aik) in arow.iter().enumerate() {
                    if *aik == ZERO {
                        continue;
                    }
                    let (ar, ai) = (aik.re, aik.im);
                    let brow = &b[(kk + p) * n + jj..(kk + p) * n + jend];
                    for (cv, bv) in crow.iter_mut().zip(brow) {
                        cv.re += ar * bv.re - ai * bv.im;
                        cv.im += ar * bv.im + ai * bv.re;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_matrix(n: usize, seed: u64) -> CMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CMatrix::from_fn(n, n, |_, _| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
    }

    pub(crate) fn random_hermitian(n: usize, seed: u64) -> CMatrix {
        let a = random_matrix(n, seed);
        a.add_scaled(ONE, &a.adjoint()).scale(C64::new(0.5, 0.0))
    }

    fn naive_matmul(a: &CMatrix, b: &CMatrix) -> CMatrix {
        CMatrix::from_fn(a.rows(), b.cols(), |i, j| {
            (0..a.cols()).map(|k| a[(i, k)] * b[(k, j)]).sum()
        })
    }

    #[test]
    fn blocked_matmul_matches_naive_product() {
        // sizes straddle the tile edges
        for (m, k, n) in [(3, 5, 7), (70, 130, 300), (1, 1, 1)] {
            let mut rng = ChaCha8Rng::seed_from_u64((m * k * n) as u64);
            let mut gen = |r, c| CMatrix::from_fn(r, c, |_, _| C64::new(rng.gen(), rng.gen()));
            let a = gen(m, k);
            let b = gen(k, n);
            assert!(a.matmul(&b).max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
        }
    }

    #[test]
    fn adjoint_and_matvec() {
        let a = random_matrix(9, 4);
        let x: Vec<C64> = (0..9).map(|i| C64::new(i as f64, -1.0)).collect();
        let direct = a.adjoint().matvec(&x);
        let fused = a.adjoint_matvec(&x);
        for (u, v) in direct.iter().zip(&fused) {
            assert!((u - v).norm() < 1e-12);
        }
        assert_eq!(a.adjoint().adjoint(), a);
    }

    #[test]
    fn defects() {
        let h = random_hermitian(6, 1);
        assert!(h.hermiticity_defect() < 1e-15);
        assert!(random_matrix(6, 2).hermiticity_defect() > 0.1);
        assert!(CMatrix::identity(5).unitarity_defect() == 0.0);
    }

    #[test]
    fn newton_schulz_restores_unitarity() {
        let n = 16;
        let eig = eigh(&random_hermitian(n, 3)).unwrap();
        let noise = random_matrix(n, 5).scale(C64::new(1e-5, 0.0));
        let mut x = eig.vectors.add_scaled(ONE, &noise);
        assert!(x.unitarity_defect() > 1e-6);
        for _ in 0..3 {
            x = x.newton_schulz_step();
        }
        assert!(x.unitarity_defect() < 1e-13);
        assert!(x.max_abs_diff(&eig.vectors) < 1e-4);
    }
}
