//! Eigendecomposition of unitary (more generally, normal) matrices.
//!
//! A normal matrix `U` shares its eigenvectors with every Hermitian
//! combination `K = (e^{−iθ} U + e^{iθ} U†) / 2`, whose eigenvalues are
//! `cos(φ − θ)`. Two distinct eigenphases collide in `K` only when they are
//! mirror images about `θ`; such clusters are re-diagonalised inside their
//! (approximately invariant) subspace with a different `θ`.

use alloc::vec::Vec;

use num_complex::Complex64 as C64;

use super::{eigh, CMatrix};
use crate::{Error, Result};

const GOLDEN_ANGLE: f64 = 2.399_963_229_728_653;
const CLUSTER_GAP: f64 = 1e-7;
const MAX_DEPTH: usize = 6;
const RECONSTRUCTION_TOLERANCE: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct UnitaryEigen {
    /// `φ_k` with eigenvalue `e^{iφ_k}`, in `(−π, π]`.
    pub phases: Vec<f64>,
    /// Unitary; column `k` belongs to `phases[k]`.
    pub vectors: CMatrix,
    /// `max |U V − V Λ|`.
    pub residual: f64,
}

/// `U = V diag(e^{iφ}) V†`. Fails when the reconstruction residual exceeds
/// `1e−8`.
pub fn diagonalize_unitary(u: &CMatrix) -> Result<UnitaryEigen> {
    assert!(u.is_square(), "diagonalize_unitary needs a square matrix");
    let vectors = normal_eigenvectors(u, 0)?;
    let uv = u.matmul(&vectors);
    let n = u.rows();
    let mut eigenvalues: Vec<C64> = Vec::with_capacity(n);
    for k in 0..n {
        let mut lambda = C64::new(0.0, 0.0);
        for r in 0..n {
            lambda += vectors[(r, k)].conj() * uv[(r, k)];
        }
        eigenvalues.push(lambda);
    }
    let mut residual = 0.0f64;
    for r in 0..n {
        for k in 0..n {
            residual = residual.max((uv[(r, k)] - vectors[(r, k)] * eigenvalues[k]).norm());
        }
    }
    if !(residual <= RECONSTRUCTION_TOLERANCE) {
        return Err(Error::Diagonalization { residual });
    }
    Ok(UnitaryEigen {
        phases: eigenvalues.iter().map(|l| l.arg()).collect(),
        vectors,
        residual,
    })
}

fn normal_eigenvectors(u: &CMatrix, depth: usize) -> Result<CMatrix> {
    let n = u.rows();
    let theta = GOLDEN_ANGLE * (depth + 1) as f64;
    let rot = C64::from_polar(0.5, -theta);
    let k = u.scale(rot).add_scaled(rot.conj(), &u.adjoint());
    let eig = eigh(&k)?;
    let mut vectors = eig.vectors;
    if depth >= MAX_DEPTH {
        return Ok(vectors);
    }

    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && eig.values[end] - eig.values[end - 1] < CLUSTER_GAP {
            end += 1;
        }
        if end - start > 1 {
            refine_cluster(u, &mut vectors, start, end, depth)?;
        }
        start = end;
    }
    Ok(vectors)
}

/// Diagonalises `U` compressed onto columns `start..end` and rotates those
/// columns accordingly.
fn refine_cluster(
    u: &CMatrix,
    vectors: &mut CMatrix,
    start: usize,
    end: usize,
    depth: usize,
) -> Result<()> {
    let n = u.rows();
    let width = end - start;
    let basis = CMatrix::from_fn(n, width, |r, c| vectors[(r, start + c)]);
    let block = basis.adjoint().matmul(&u.matmul(&basis));
    let off_diagonal = (0..width)
        .flat_map(|r| (0..width).filter(move |&c| c != r).map(move |c| (r, c)))
        .map(|(r, c)| block[(r, c)].norm())
        .fold(0.0, f64::max);
    if off_diagonal < 1e-13 {
        return Ok(());
    }
    let rotation = normal_eigenvectors(&block, depth + 1)?;
    let rotated = basis.matmul(&rotation);
    for r in 0..n {
        for c in 0..width {
            vectors[(r, start + c)] = rotated[(r, c)];
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::tests::random_hermitian;
    use core::f64::consts::PI;

    fn unitary_from_phases(phases: &[f64], seed: u64) -> CMatrix {
        let basis = eigh(&random_hermitian(phases.len(), seed)).unwrap().vectors;
        let diag: Vec<C64> = phases.iter().map(|p| C64::from_polar(1.0, *p)).collect();
        basis
            .matmul(&CMatrix::from_diagonal(&diag))
            .matmul(&basis.adjoint())
    }

    fn sorted(mut v: Vec<f64>) -> Vec<f64> {
        v.sort_by(f64::total_cmp);
        v
    }

    fn check(u: &CMatrix, expected: &[f64]) {
        let eig = diagonalize_unitary(u).unwrap();
        assert!(eig.residual < 1e-10, "residual {:e}", eig.residual);
        assert!(eig.vectors.unitarity_defect() < 1e-10);
        for (g, e) in sorted(eig.phases).iter().zip(sorted(expected.to_vec())) {
            assert!((g - e).abs() < 1e-10, "{g} vs {e}");
        }
    }

    #[test]
    fn random_spectrum() {
        let phases: Vec<f64> = (0..40).map(|k| -PI + 0.1 + 0.153 * k as f64).collect();
        check(&unitary_from_phases(&phases, 11), &phases);
    }

    #[test]
    fn mirrored_phases_are_separated() {
        // φ and 2θ − φ collide in the first Hermitian combination
        let theta = GOLDEN_ANGLE;
        let phases = [0.3, 2.0 * theta - 0.3 - 2.0 * PI, 1.1, -2.0, 0.5];
        check(&unitary_from_phases(&phases, 12), &phases);
    }

    #[test]
    fn exact_degeneracies_and_near_degenerate_pairs() {
        let phases = [0.7, 0.7, 0.7, -1.2, -1.2, 2.5, 2.5 + 1e-11, 3.0];
        check(&unitary_from_phases(&phases, 13), &phases);
    }

    #[test]
    fn diagonal_input() {
        let phases = [0.0, 1.0, -1.0, 1.0, 0.0];
        let diag: Vec<C64> = phases.iter().map(|p| C64::from_polar(1.0, *p)).collect();
        check(&CMatrix::from_diagonal(&diag), &phases);
    }
}
