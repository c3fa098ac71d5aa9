//! Hermitian eigendecomposition: Householder reduction to a real symmetric
//! tridiagonal matrix followed by implicit QL iterations with Wilkinson-type
//! shifts.

use alloc::vec;
use alloc::vec::Vec;

use num_complex::Complex64 as C64;

use super::{CMatrix, ONE, ZERO};
use crate::{Error, Result};

const MAX_QL_SWEEPS: usize = 60;

/// Eigenvalues in ascending order; eigenvector `j` is column `j`.
#[derive(Clone, Debug)]
pub struct HermitianEigen {
    pub values: Vec<f64>,
    pub vectors: CMatrix,
}

/// Full eigendecomposition of a Hermitian matrix. Only the matrix as given is
/// used; callers are responsible for checking Hermiticity.
pub fn eigh(a: &CMatrix) -> Result<HermitianEigen> {
    let n = a.rows();
    assert!(a.is_square(), "eigh needs a square matrix");
    if n == 0 {
        return Ok(HermitianEigen {
            values: Vec::new(),
            vectors: CMatrix::zeros(0, 0),
        });
    }
    let mut work = a.clone();
    let reduced = tridiagonalize(&mut work, true);
    let (mut diag, mut off, phases) = reduced.real_form();

    // rows of `zt` are the tridiagonal eigenvectors
    let mut zt = vec![0.0; n * n];
    for i in 0..n {
        zt[i * n + i] = 1.0;
    }
    implicit_ql(&mut diag, &mut off, Some(&mut zt))?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diag[i].total_cmp(&diag[j]));

    let mut vectors = CMatrix::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        for r in 0..n {
            vectors[(r, col)] = phases[r] * zt[src * n + r];
        }
    }
    reduced.apply_reflectors(&mut vectors);

    Ok(HermitianEigen {
        values: order.iter().map(|&i| diag[i]).collect(),
        vectors,
    })
}

/// Eigenvalues only, ascending.
pub fn eigvalsh(a: &CMatrix) -> Result<Vec<f64>> {
    assert!(a.is_square(), "eigvalsh needs a square matrix");
    if a.rows() == 0 {
        return Ok(Vec::new());
    }
    let mut work = a.clone();
    let (mut diag, mut off, _) = tridiagonalize(&mut work, false).real_form();
    implicit_ql(&mut diag, &mut off, None)?;
    diag.sort_by(f64::total_cmp);
    Ok(diag)
}

struct Reflector {
    /// Rows `offset..offset + u.len()` are touched.
    offset: usize,
    u: Vec<C64>,
    tau: f64,
}

struct Tridiagonal {
    diag: Vec<f64>,
    /// `sub[k]` is the element at `(k + 1, k)`.
    sub: Vec<C64>,
    reflectors: Vec<Reflector>,
}

impl Tridiagonal {
    /// Real symmetric form `D† T D` with `D` diagonal unitary. Returns the
    /// diagonal, the (non-negative) off-diagonal padded with a trailing zero,
    /// and the entries of `D`.
    fn real_form(&self) -> (Vec<f64>, Vec<f64>, Vec<C64>) {
        let n = self.diag.len();
        let mut phases = vec![ONE; n];
        let mut off = vec![0.0; n];
        for (k, s) in self.sub.iter().enumerate() {
            let magnitude = s.norm();
            off[k] = magnitude;
            phases[k + 1] = if magnitude > 0.0 {
                phases[k] * (s / magnitude)
            } else {
                phases[k]
            };
        }
        (self.diag.clone(), off, phases)
    }

    /// `x ← Q x` where `A = Q T Q†`.
    fn apply_reflectors(&self, x: &mut CMatrix) {
        let cols = x.cols();
        let mut w = vec![ZERO; cols];
        for refl in self.reflectors.iter().rev() {
            w.iter_mut().for_each(|v| *v = ZERO);
            for (r, u) in refl.u.iter().enumerate() {
                let uc = u.conj();
                for (wc, xv) in w.iter_mut().zip(x.row(refl.offset + r)) {
                    *wc += uc * xv;
                }
            }
            for (r, u) in refl.u.iter().enumerate() {
                let scaled = u * refl.tau;
                for (xv, wc) in x.row_mut(refl.offset + r).iter_mut().zip(&w) {
                    *xv -= scaled * wc;
                }
            }
        }
    }
}

/// Reduces `a` in place with two-sided Householder reflections
/// `H = I − τ u u†` chosen so every subdiagonal becomes a single entry.
fn tridiagonalize(a: &mut CMatrix, keep_reflectors: bool) -> Tridiagonal {
    let n = a.rows();
    let mut sub = Vec::with_capacity(n.saturating_sub(1));
    let mut reflectors = Vec::new();
    let mut p = vec![ZERO; n];

    for k in 0..n.saturating_sub(1) {
        let m = n - k - 1;
        let start = k + 1;
        let mut u: Vec<C64> = (0..m).map(|j| a[(start + j, k)]).collect();
        let tail: f64 = u[1..].iter().map(|v| v.norm_sqr()).sum();
        if tail == 0.0 {
            sub.push(u[0]);
            continue;
        }
        let head = u[0].norm();
        let alpha = (head * head + tail).sqrt();
        let phase = if head > 0.0 { u[0] / head } else { ONE };
        u[0] += phase * alpha;
        let tau = 1.0 / (alpha * (alpha + head));
        sub.push(-phase * alpha);

        // p = τ B u with B the trailing block
        let p = &mut p[..m];
        for (r, pr) in p.iter_mut().enumerate() {
            *pr = super::dot(&a.row(start + r)[start..], &u) * tau;
        }
        let kappa = 0.5 * tau * super::dot_conj(&u, p).re;
        for (pr, ur) in p.iter_mut().zip(&u) {
            *pr -= ur * kappa;
        }
        // B ← B − u q† − q u†
        for r in 0..m {
            let (ur, qr) = (u[r], p[r]);
            let row = &mut a.row_mut(start + r)[start..];
            for ((b, uc), qc) in row.iter_mut().zip(&u).zip(p.iter()) {
                *b -= ur * qc.conj() + qr * uc.conj();
            }
        }
        if keep_reflectors {
            reflectors.push(Reflector {
                offset: start,
                u,
                tau,
            });
        }
    }

    Tridiagonal {
        diag: (0..n).map(|i| a[(i, i)].re).collect(),
        sub,
        reflectors,
    }
}

/// Implicit QL on a real symmetric tridiagonal matrix. `off[i]` couples `i`
/// and `i + 1`; `off[n − 1]` must be zero. When `zt` is given, its rows are
/// rotated along with the matrix, so starting from the identity row `j` ends
/// up holding eigenvector `j`.
fn implicit_ql(d: &mut [f64], e: &mut [f64], mut zt: Option<&mut [f64]>) -> Result<()> {
    let n = d.len();
    let scale = d
        .iter()
        .zip(e.iter())
        .map(|(a, b)| a.abs() + b.abs())
        .fold(0.0, f64::max);
    let negligible = f64::EPSILON * f64::EPSILON * scale;
    for l in 0..n {
        let mut sweeps = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd || e[m].abs() <= negligible {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            sweeps += 1;
            if sweeps > MAX_QL_SWEEPS {
                return Err(Error::NoConvergence);
            }

            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut i = m;
            let mut deflated = false;
            while i > l {
                i -= 1;
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    deflated = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                if let Some(zt) = zt.as_deref_mut() {
                    let (lo, hi) = zt.split_at_mut((i + 1) * n);
                    let row_i = &mut lo[i * n..];
                    let row_next = &mut hi[..n];
                    for (zi, zn) in row_i.iter_mut().zip(row_next.iter_mut()) {
                        let t = *zn;
                        *zn = s * *zi + c * t;
                        *zi = c * *zi - s * t;
                    }
                }
            }
            if deflated {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    Ok(())
}
