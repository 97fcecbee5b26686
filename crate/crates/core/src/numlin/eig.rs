//! Symmetric eigendecomposition by cyclic Jacobi rotations.

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{dim_err, Error, Result};

/// Relative off-diagonal mass at which Jacobi sweeps stop.
pub const JACOBI_TOL: f64 = 1e-12;
/// Margin used by every strict definiteness test.
pub const EPS_DEF: f64 = 1e-9;

const MAX_SWEEPS: usize = 100;

/// Eigenvalues in descending order with matching orthonormal eigenvector
/// columns.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SymEig {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
}

impl SymEig {
    /// `V diag(f(λ)) Vᵀ`.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let n = self.eigenvalues.len();
        let v = &self.eigenvectors;
        let fl: Vec<f64> = self.eigenvalues.iter().map(|&l| f(l)).collect();
        let mut out = Matrix::zeros(n, n);
        for (k, &lk) in fl.iter().enumerate() {
            if lk == 0.0 {
                continue;
            }
            for i in 0..n {
                let vik = v.get(i, k) * lk;
                if vik == 0.0 {
                    continue;
                }
                for j in i..n {
                    out[(i, j)] += vik * v.get(j, k);
                }
            }
        }
        for i in 0..n {
            for j in 0..i {
                out[(i, j)] = out[(j, i)];
            }
        }
        out
    }

    pub fn reconstruct(&self) -> Matrix {
        self.reconstruct_with(|l| l)
    }

    pub fn min(&self) -> f64 {
        self.eigenvalues.last().copied().unwrap_or(f64::INFINITY)
    }

    pub fn max(&self) -> f64 {
        self.eigenvalues.first().copied().unwrap_or(f64::NEG_INFINITY)
    }
}

fn check_input(m: &Matrix) -> Result<()> {
    if !m.is_square() {
        return Err(dim_err(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite("eigendecomposition input".into()));
    }
    Ok(())
}

/// Eigendecomposition of the symmetric part of `m`.
pub fn sym_eig(m: &Matrix) -> Result<SymEig> {
    check_input(m)?;
    let a = m.symmetrize()?;
    let n = a.rows();
    Ok(jacobi(a, Matrix::identity(n)))
}

/// Same as [`sym_eig`] but starts from a previous orthonormal basis, which
/// cuts the number of sweeps when `m` is close to a matrix already
/// diagonalized by `basis`.
pub fn sym_eig_warm(m: &Matrix, basis: &Matrix) -> Result<SymEig> {
    check_input(m)?;
    if basis.shape() != m.shape() {
        return sym_eig(m);
    }
    let a = m.symmetrize()?;
    let rotated = basis.tr_matmul(&(&a * basis))?.symmetrize()?;
    Ok(jacobi(rotated, basis.clone()))
}

fn jacobi(mut a: Matrix, mut v: Matrix) -> SymEig {
    let n = a.rows();
    let total = a.frobenius_norm();
    if n > 1 && total > 0.0 {
        let target = JACOBI_TOL * total;
        for _ in 0..MAX_SWEEPS {
            let mut off = 0.0;
            for p in 0..n {
                for q in (p + 1)..n {
                    off += 2.0 * a.get(p, q) * a.get(p, q);
                }
            }
            if off.sqrt() < target {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = a.get(p, q);
                    if apq.abs() < 1e-300 {
                        continue;
                    }
                    rotate(&mut a, &mut v, p, q, apq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    let diag = a.diag();
    order.sort_by(|&i, &j| diag[j].total_cmp(&diag[i]));
    let eigenvalues = order.iter().map(|&i| diag[i]).collect();
    let eigenvectors = Matrix::from_fn(n, n, |i, k| v.get(i, order[k]));
    SymEig {
        eigenvalues,
        eigenvectors,
    }
}

fn rotate(a: &mut Matrix, v: &mut Matrix, p: usize, q: usize, apq: f64) {
    let n = a.rows();
    let app = a.get(p, p);
    let aqq = a.get(q, q);
    let theta = (aqq - app) / (2.0 * apq);
    // signum(0.0) is 1.0, so θ = 0 gives the 45° rotation.
    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
    let c = 1.0 / (t * t + 1.0).sqrt();
    let s = t * c;

    a.set(p, p, app - t * apq);
    a.set(q, q, aqq + t * apq);
    a.set(p, q, 0.0);
    a.set(q, p, 0.0);
    for k in 0..n {
        if k == p || k == q {
            continue;
        }
        let akp = a.get(k, p);
        let akq = a.get(k, q);
        let nkp = c * akp - s * akq;
        let nkq = s * akp + c * akq;
        a.set(k, p, nkp);
        a.set(p, k, nkp);
        a.set(k, q, nkq);
        a.set(q, k, nkq);
    }
    for k in 0..n {
        let vkp = v.get(k, p);
        let vkq = v.get(k, q);
        v.set(k, p, c * vkp - s * vkq);
        v.set(k, q, s * vkp + c * vkq);
    }
}

/// Frobenius-nearest PSD matrix: negative eigenvalues clipped to zero.
pub fn psd_project(m: &Matrix) -> Result<Matrix> {
    Ok(sym_eig(m)?.reconstruct_with(|l| l.max(0.0)))
}

pub fn min_eigenvalue(m: &Matrix) -> Result<f64> {
    Ok(sym_eig(m)?.min())
}

pub fn max_eigenvalue(m: &Matrix) -> Result<f64> {
    Ok(sym_eig(m)?.max())
}

/// Spectral norm of a symmetric matrix.
pub fn sym_norm2(m: &Matrix) -> Result<f64> {
    let e = sym_eig(m)?;
    Ok(e.max().abs().max(e.min().abs()))
}

/// `m ≻ 0` with the shared strictness margin.
pub fn is_positive_definite(m: &Matrix) -> Result<bool> {
    let e = sym_eig(m)?;
    let scale = e.max().abs().max(e.min().abs()).max(1.0);
    Ok(e.min() > EPS_DEF * scale)
}

/// `m ≺ 0` with the shared strictness margin.
pub fn is_negative_definite(m: &Matrix) -> Result<bool> {
    is_positive_definite(&m.scale(-1.0))
}
