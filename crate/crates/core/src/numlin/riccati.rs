//! Discrete algebraic Riccati equation.

use super::matrix::Matrix;
use super::solve::{inverse, solve};
use crate::error::{dim_err, Error, Result};

const MAX_DOUBLING: usize = 200;
const MAX_FIXED_POINT: usize = 100_000;

/// Right-hand side minus left-hand side of the DARE at `p`.
pub fn dare_residual(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix, p: &Matrix) -> Result<Matrix> {
    let next = dare_map(a, b, q, r, p)?;
    Ok(&next - p)
}

fn dare_map(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix, p: &Matrix) -> Result<Matrix> {
    let pa = p * a;
    let pb = p * b;
    let s = r + &b.tr_matmul(&pb)?;
    let bpa = b.tr_matmul(&pa)?;
    let gain = solve(&s, &bpa)?;
    let out = &(&a.tr_matmul(&pa)? - &bpa.tr_matmul(&gain)?) + q;
    out.symmetrize()
}

/// Stabilizing solution of
/// `P = AᵀPA − AᵀPB(R + BᵀPB)⁻¹BᵀPA + Q`
/// by the structured doubling algorithm, with a fixed-point fallback.
pub fn solve_dare(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    let m = b.cols();
    if !a.is_square() || b.rows() != n || q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(dim_err("DARE operands have inconsistent shapes"));
    }
    for (mat, name) in [(a, "A"), (b, "B"), (q, "Q"), (r, "R")] {
        mat.ensure_finite(name)?;
    }
    let accept = |p: &Matrix| -> Result<bool> {
        if !p.is_finite() {
            return Ok(false);
        }
        let res = dare_residual(a, b, q, r, p)?.frobenius_norm();
        Ok(res <= 1e-8 * p.frobenius_norm().max(1e-300) || res <= 1e-14)
    };

    if let Ok(p) = doubling(a, b, q, r) {
        if accept(&p)? {
            return Ok(p);
        }
    }
    let mut p = q.clone();
    for _ in 0..MAX_FIXED_POINT {
        let next = dare_map(a, b, q, r, &p)?;
        let step = (&next - &p).frobenius_norm();
        p = next;
        if !p.is_finite() || p.max_abs() > 1e150 {
            break;
        }
        if step <= 1e-14 * p.frobenius_norm().max(1.0) {
            break;
        }
    }
    if accept(&p)? {
        Ok(p)
    } else {
        Err(Error::NoSolution("Riccati iteration did not converge".into()))
    }
}

fn doubling(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    let eye = Matrix::identity(n);
    let mut ak = a.clone();
    let mut gk = (&(b * &inverse(r)?) * &b.transpose()).symmetrize()?;
    let mut hk = q.symmetrize()?;
    for _ in 0..MAX_DOUBLING {
        let w = &eye + &(&gk * &hk);
        // W⁻¹A and W⁻¹G share one factorization.
        let wa = solve(&w, &ak)?;
        let wg = solve(&w, &gk)?;
        let a_next = &ak * &wa;
        let g_next = (&gk + &(&(&ak * &wg) * &ak.transpose())).symmetrize()?;
        let h_next = (&hk + &(&ak.tr_matmul(&hk)? * &wa)).symmetrize()?;
        let change = (&h_next - &hk).frobenius_norm();
        ak = a_next;
        gk = g_next;
        hk = h_next;
        if !hk.is_finite() {
            return Err(Error::NonFinite("doubling iterate".into()));
        }
        if change <= 1e-15 * hk.frobenius_norm().max(1e-300) || ak.max_abs() < 1e-300 {
            break;
        }
    }
    // A couple of fixed-point sweeps polish the last digits.
    for _ in 0..3 {
        hk = dare_map(a, b, q, r, &hk)?;
    }
    Ok(hk)
}

/// LQR gain `K = (R + BᵀPB)⁻¹BᵀPA` for the control law `u = −Kx`.
pub fn dare_gain(a: &Matrix, b: &Matrix, r: &Matrix, p: &Matrix) -> Result<Matrix> {
    let s = r + &b.tr_matmul(&(p * b))?;
    solve(&s, &b.tr_matmul(&(p * a))?)
}
