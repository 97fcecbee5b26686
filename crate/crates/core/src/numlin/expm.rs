//! Matrix exponential and zero-order-hold discretization.

use super::matrix::Matrix;
use crate::error::{dim_err, Result};

/// `exp(A)` by scaling and squaring of a truncated Taylor series. Terms are
/// added until they drop below machine precision relative to the running
/// sum, well inside the 1e-12 accuracy the discretization needs.
pub fn expm(a: &Matrix) -> Result<Matrix> {
    if !a.is_square() {
        return Err(dim_err("expm needs a square matrix"));
    }
    a.ensure_finite("expm input")?;
    let n = a.rows();
    let norm = a.max_abs() * n as f64;
    let mut squarings = 0;
    let mut scale = 1.0;
    while norm * scale > 0.5 {
        scale *= 0.5;
        squarings += 1;
    }
    let x = a.scale(scale);
    let mut sum = Matrix::identity(n);
    let mut term = Matrix::identity(n);
    for k in 1..64 {
        term = (&term * &x).scale(1.0 / k as f64);
        sum += &term;
        if term.max_abs() <= f64::EPSILON * sum.max_abs() {
            break;
        }
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    Ok(sum)
}

/// Zero-order-hold discretization of `ẋ = Ax + Bu` with step `dt`.
pub fn zoh(a: &Matrix, b: &Matrix, dt: f64) -> Result<(Matrix, Matrix)> {
    let n = a.rows();
    let m = b.cols();
    if !a.is_square() || b.rows() != n {
        return Err(dim_err("zoh operands have inconsistent shapes"));
    }
    let mut aug = Matrix::zeros(n + m, n + m);
    aug.set_block(0, 0, &a.scale(dt));
    aug.set_block(0, n, &b.scale(dt));
    let e = expm(&aug)?;
    Ok((e.submatrix(0, 0, n, n), e.submatrix(0, n, n, m)))
}
