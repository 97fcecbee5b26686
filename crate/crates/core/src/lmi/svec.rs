//! Scaled symmetric vectorization.
//!
//! Lower triangle, column by column, with off-diagonal entries multiplied by
//! √2 so that `⟨svec A, svec B⟩ = tr(AB)`.

use crate::error::{dim_err, Result};
use crate::numlin::Matrix;

pub const SQRT2: f64 = std::f64::consts::SQRT_2;

pub fn svec_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Position of entry `(i, j)` (either triangle) in the svec of an `n×n`
/// matrix.
#[inline]
pub fn svec_index(n: usize, i: usize, j: usize) -> usize {
    let (r, c) = if i >= j { (i, j) } else { (j, i) };
    // column c starts after n + (n−1) + … + (n−c+1) entries
    c * n - c * c.saturating_sub(1) / 2 + (r - c)
}

pub fn svec(m: &Matrix) -> Result<Vec<f64>> {
    if !m.is_square() {
        return Err(dim_err("svec needs a square matrix"));
    }
    let n = m.rows();
    let mut out = Vec::with_capacity(svec_len(n));
    for j in 0..n {
        out.push(m.get(j, j));
        for i in (j + 1)..n {
            out.push(SQRT2 * 0.5 * (m.get(i, j) + m.get(j, i)));
        }
    }
    Ok(out)
}

/// Writes `svec(m)` into `out`, which must have the right length.
pub fn svec_into(m: &Matrix, out: &mut [f64]) {
    let n = m.rows();
    let mut k = 0;
    for j in 0..n {
        out[k] = m.get(j, j);
        k += 1;
        for i in (j + 1)..n {
            out[k] = SQRT2 * 0.5 * (m.get(i, j) + m.get(j, i));
            k += 1;
        }
    }
}

/// Dimension `n` with `svec_len(n) = len`, if any.
pub fn smat_dim(len: usize) -> Option<usize> {
    let n = (((8 * len + 1) as f64).sqrt() as usize).saturating_sub(1) / 2;
    (n.saturating_sub(1)..=n + 1).find(|&k| svec_len(k) == len)
}

pub fn smat(v: &[f64]) -> Result<Matrix> {
    let n = smat_dim(v.len()).ok_or_else(|| dim_err(format!("{} is not a triangular number", v.len())))?;
    Ok(smat_n(v, n))
}

pub(crate) fn smat_n(v: &[f64], n: usize) -> Matrix {
    let mut m = Matrix::zeros(n, n);
    let mut k = 0;
    for j in 0..n {
        m.set(j, j, v[k]);
        k += 1;
        for i in (j + 1)..n {
            let x = v[k] / SQRT2;
            m.set(i, j, x);
            m.set(j, i, x);
            k += 1;
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_case() {
        assert_eq!(svec(&Matrix::from_diag(&[1.0, 2.0])).unwrap(), vec![1.0, 0.0, 2.0]);
    }

    #[test]
    fn off_diagonal_scaling() {
        let v = svec(&Matrix::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]])).unwrap();
        assert!((crate::numlin::norm2(&v) - SQRT2).abs() < 1e-15);
    }

    #[test]
    fn index_matches_layout() {
        for n in 1..7 {
            let m = Matrix::from_fn(n, n, |i, j| (i.max(j) * 10 + i.min(j)) as f64);
            let v = svec(&m).unwrap();
            for i in 0..n {
                for j in 0..n {
                    let k = svec_index(n, i, j);
                    let want = if i == j { m.get(i, j) } else { SQRT2 * m.get(i, j) };
                    assert!((v[k] - want).abs() < 1e-12, "n={n} ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn round_trip_and_dims() {
        let m = Matrix::from_rows(&[&[1.0, 2.0, 3.0], &[2.0, 4.0, 5.0], &[3.0, 5.0, 6.0]]);
        assert_eq!(smat(&svec(&m).unwrap()).unwrap(), m);
        assert!(smat(&[1.0, 2.0]).is_err());
        for n in 0..40 {
            assert_eq!(smat_dim(svec_len(n)), Some(n));
        }
    }
}
