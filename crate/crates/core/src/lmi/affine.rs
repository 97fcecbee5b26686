//! Matrices whose entries are affine in the decision vector.
//!
//! These are the building blocks for assembling LMIs: decision matrices come
//! from a [`VarRegistry`], get multiplied by constant matrices, and are
//! stacked into a symmetric [`AffMat`] that converts into an [`LmiBlock`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::problem::{LmiBlock, SparseSym};
use crate::error::{dim_err, Result};
use crate::numlin::Matrix;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AffExpr {
    pub constant: f64,
    pub terms: Vec<(usize, f64)>,
}

impl AffExpr {
    pub fn constant(c: f64) -> AffExpr {
        AffExpr {
            constant: c,
            terms: Vec::new(),
        }
    }

    pub fn var(v: usize) -> AffExpr {
        AffExpr {
            constant: 0.0,
            terms: vec![(v, 1.0)],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.constant == 0.0 && self.terms.is_empty()
    }

    pub fn add_scaled(&mut self, other: &AffExpr, s: f64) {
        if s == 0.0 {
            return;
        }
        self.constant += s * other.constant;
        self.terms.extend(other.terms.iter().map(|&(v, c)| (v, s * c)));
    }

    /// Merges repeated variables and drops zeros.
    pub fn compact(&mut self) {
        if self.terms.len() < 2 {
            self.terms.retain(|t| t.1 != 0.0);
            return;
        }
        self.terms.sort_by_key(|t| t.0);
        let mut out: Vec<(usize, f64)> = Vec::with_capacity(self.terms.len());
        for &(v, c) in &self.terms {
            match out.last_mut() {
                Some(last) if last.0 == v => last.1 += c,
                _ => out.push((v, c)),
            }
        }
        out.retain(|t| t.1 != 0.0);
        self.terms = out;
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|&(v, c)| c * x[v]).sum::<f64>()
    }
}

/// Dense matrix of affine expressions.
#[derive(Clone, Debug, PartialEq)]
pub struct AffMat {
    rows: usize,
    cols: usize,
    entries: Vec<AffExpr>,
}

impl AffMat {
    pub fn zeros(rows: usize, cols: usize) -> AffMat {
        AffMat {
            rows,
            cols,
            entries: vec![AffExpr::default(); rows * cols],
        }
    }

    pub fn constant(m: &Matrix) -> AffMat {
        AffMat {
            rows: m.rows(),
            cols: m.cols(),
            entries: m.data().iter().map(|&c| AffExpr::constant(c)).collect(),
        }
    }

    pub fn identity(n: usize) -> AffMat {
        AffMat::constant(&Matrix::identity(n))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> &AffExpr {
        &self.entries[i * self.cols + j]
    }

    pub fn get_mut(&mut self, i: usize, j: usize) -> &mut AffExpr {
        &mut self.entries[i * self.cols + j]
    }

    pub fn transpose(&self) -> AffMat {
        let mut out = AffMat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.entries[j * self.rows + i] = self.get(i, j).clone();
            }
        }
        out
    }

    pub fn scale(&self, s: f64) -> AffMat {
        let mut out = AffMat::zeros(self.rows, self.cols);
        for (o, e) in out.entries.iter_mut().zip(&self.entries) {
            o.add_scaled(e, s);
        }
        out
    }

    pub fn add(&self, other: &AffMat) -> Result<AffMat> {
        self.lin_comb(other, 1.0)
    }

    pub fn sub(&self, other: &AffMat) -> Result<AffMat> {
        self.lin_comb(other, -1.0)
    }

    fn lin_comb(&self, other: &AffMat, s: f64) -> Result<AffMat> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(dim_err(format!(
                "affine matrices {}x{} and {}x{} differ in shape",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = self.clone();
        for (o, e) in out.entries.iter_mut().zip(&other.entries) {
            o.add_scaled(e, s);
            o.compact();
        }
        Ok(out)
    }

    pub fn add_constant(&self, m: &Matrix) -> Result<AffMat> {
        self.add(&AffMat::constant(m))
    }

    /// `M · X` for a constant `M`.
    pub fn left_mul(&self, m: &Matrix) -> Result<AffMat> {
        if m.cols() != self.rows {
            return Err(dim_err("left constant factor has the wrong width"));
        }
        let mut out = AffMat::zeros(m.rows(), self.cols);
        for i in 0..m.rows() {
            for k in 0..self.rows {
                let a = m.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..self.cols {
                    out.entries[i * self.cols + j].add_scaled(&self.entries[k * self.cols + j], a);
                }
            }
        }
        out.compact_all();
        Ok(out)
    }

    /// `X · M` for a constant `M`.
    pub fn right_mul(&self, m: &Matrix) -> Result<AffMat> {
        if m.rows() != self.cols {
            return Err(dim_err("right constant factor has the wrong height"));
        }
        let mut out = AffMat::zeros(self.rows, m.cols());
        for i in 0..self.rows {
            for k in 0..self.cols {
                let e = &self.entries[i * self.cols + k];
                if e.is_zero() {
                    continue;
                }
                for j in 0..m.cols() {
                    let a = m.get(k, j);
                    if a != 0.0 {
                        out.entries[i * m.cols() + j].add_scaled(e, a);
                    }
                }
            }
        }
        out.compact_all();
        Ok(out)
    }

    /// `X + Xᵀ`.
    pub fn he(&self) -> Result<AffMat> {
        self.add(&self.transpose())
    }

    fn compact_all(&mut self) {
        for e in &mut self.entries {
            e.compact();
        }
    }

    pub fn eval(&self, x: &[f64]) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |i, j| self.get(i, j).eval(x))
    }

    /// Assembles a block grid; `None` entries are zero. Block heights and
    /// widths are taken from the present entries.
    pub fn from_blocks(grid: &[Vec<Option<AffMat>>]) -> Result<AffMat> {
        let nr = grid.len();
        let nc = grid.first().map_or(0, |r| r.len());
        let mut heights = vec![None; nr];
        let mut widths = vec![None; nc];
        for (bi, row) in grid.iter().enumerate() {
            if row.len() != nc {
                return Err(dim_err("ragged block grid"));
            }
            for (bj, blk) in row.iter().enumerate() {
                if let Some(m) = blk {
                    for (slot, v) in [(&mut heights[bi], m.rows), (&mut widths[bj], m.cols)] {
                        match slot {
                            None => *slot = Some(v),
                            Some(prev) if *prev != v => {
                                return Err(dim_err(format!("inconsistent block size at ({bi},{bj})")))
                            }
                            _ => {}
                        }
                    }
                }
            }
        }
        let heights: Vec<usize> = heights.into_iter().map(|h| h.unwrap_or(0)).collect();
        let widths: Vec<usize> = widths.into_iter().map(|w| w.unwrap_or(0)).collect();
        let total_c: usize = widths.iter().sum();
        let mut out = AffMat::zeros(heights.iter().sum(), total_c);
        let mut r0 = 0;
        for (bi, row) in grid.iter().enumerate() {
            let mut c0 = 0;
            for (bj, blk) in row.iter().enumerate() {
                if let Some(m) = blk {
                    for i in 0..m.rows {
                        for j in 0..m.cols {
                            out.entries[(r0 + i) * total_c + c0 + j] = m.get(i, j).clone();
                        }
                    }
                }
                c0 += widths[bj];
            }
            r0 += heights[bi];
        }
        Ok(out)
    }

    /// Symmetric block grid given by its upper triangle: entry `(i, j)` with
    /// `j < i` is filled with the transpose of `(j, i)`.
    pub fn sym_from_upper(upper: &[Vec<Option<AffMat>>]) -> Result<AffMat> {
        let n = upper.len();
        let mut grid: Vec<Vec<Option<AffMat>>> = vec![vec![None; n]; n];
        for i in 0..n {
            if upper[i].len() != n {
                return Err(dim_err("symmetric grid must be square"));
            }
            for j in i..n {
                if let Some(m) = &upper[i][j] {
                    if i != j {
                        grid[j][i] = Some(m.transpose());
                    }
                    grid[i][j] = Some(m.clone());
                }
            }
        }
        AffMat::from_blocks(&grid)
    }

    /// Converts a square affine matrix into an LMI block using its symmetric
    /// part.
    pub fn to_block(&self) -> Result<LmiBlock> {
        if self.rows != self.cols {
            return Err(dim_err("LMI block must be square"));
        }
        let n = self.rows;
        let mut constant = Matrix::zeros(n, n);
        let mut coeffs: BTreeMap<usize, Vec<(usize, usize, f64)>> = BTreeMap::new();
        for i in 0..n {
            for j in i..n {
                let mut e = self.get(i, j).clone();
                if i != j {
                    e.add_scaled(self.get(j, i), 1.0);
                    e.constant *= 0.5;
                    for t in &mut e.terms {
                        t.1 *= 0.5;
                    }
                }
                e.compact();
                constant.set(i, j, e.constant);
                constant.set(j, i, e.constant);
                for (v, c) in e.terms {
                    coeffs.entry(v).or_default().push((i, j, c));
                }
            }
        }
        let mut block = LmiBlock::new(constant)?;
        for (v, entries) in coeffs {
            block.push_sparse(v, SparseSym { entries });
        }
        Ok(block)
    }
}

/// A matrix of decision variables laid out in a decision vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VarMat {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub symmetric: bool,
}

impl VarMat {
    pub fn len(&self) -> usize {
        if self.symmetric {
            self.rows * (self.rows + 1) / 2
        } else {
            self.rows * self.cols
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Variable index of entry `(i, j)`. Symmetric matrices share one
    /// variable between `(i, j)` and `(j, i)`.
    pub fn index(&self, i: usize, j: usize) -> usize {
        if self.symmetric {
            let (r, c) = if i <= j { (i, j) } else { (j, i) };
            // row-major upper triangle
            self.offset + r * self.rows - r * r.saturating_sub(1) / 2 + (c - r)
        } else {
            self.offset + i * self.cols + j
        }
    }

    pub fn aff(&self) -> AffMat {
        let mut m = AffMat::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                *m.get_mut(i, j) = AffExpr::var(self.index(i, j));
            }
        }
        m
    }

    pub fn read(&self, x: &[f64]) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |i, j| x[self.index(i, j)])
    }

    pub fn write(&self, x: &mut [f64], m: &Matrix) {
        for i in 0..self.rows {
            for j in 0..self.cols {
                if !self.symmetric || i <= j {
                    let v = if self.symmetric {
                        0.5 * (m.get(i, j) + m.get(j, i))
                    } else {
                        m.get(i, j)
                    };
                    x[self.index(i, j)] = v;
                }
            }
        }
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Allocates decision variables sequentially.
#[derive(Clone, Debug, Default)]
pub struct VarRegistry {
    n: usize,
}

impl VarRegistry {
    pub fn new() -> VarRegistry {
        VarRegistry::default()
    }

    pub fn n_vars(&self) -> usize {
        self.n
    }

    pub fn full(&mut self, rows: usize, cols: usize) -> VarMat {
        let v = VarMat {
            offset: self.n,
            rows,
            cols,
            symmetric: false,
        };
        self.n += v.len();
        v
    }

    pub fn symmetric(&mut self, n: usize) -> VarMat {
        let v = VarMat {
            offset: self.n,
            rows: n,
            cols: n,
            symmetric: true,
        };
        self.n += v.len();
        v
    }

    pub fn scalar(&mut self) -> usize {
        self.n += 1;
        self.n - 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn products_and_evaluation() {
        let mut reg = VarRegistry::new();
        let x = reg.full(2, 2);
        let p = reg.symmetric(2);
        assert_eq!(reg.n_vars(), 7);
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[0.0, 1.0]]);
        let expr = x.aff().left_mul(&a).unwrap().right_mul(&a.transpose()).unwrap();
        let vals: Vec<f64> = (0..7).map(|k| k as f64 + 1.0).collect();
        let xm = x.read(&vals);
        let want = &(&a * &xm) * &a.transpose();
        assert!((&expr.eval(&vals) - &want).max_abs() < 1e-14);
        let pm = p.read(&vals);
        assert_eq!(pm.asymmetry(), 0.0);
        assert_eq!(pm.get(0, 1), vals[p.index(1, 0)]);
    }

    #[test]
    fn block_conversion_matches_evaluation() {
        let mut reg = VarRegistry::new();
        let x = reg.full(1, 2);
        let s = reg.scalar();
        let mut diag = AffMat::zeros(1, 1);
        *diag.get_mut(0, 0) = AffExpr::var(s);
        let grid = vec![
            vec![Some(diag), Some(x.aff())],
            vec![None, Some(AffMat::constant(&Matrix::from_diag(&[-1.0, -2.0])))],
        ];
        let m = AffMat::sym_from_upper(&grid).unwrap();
        let block = m.to_block().unwrap();
        let vals = [0.3, -0.7, 2.0];
        assert!((&block.evaluate(&vals) - &m.eval(&vals)).max_abs() < 1e-15);
        assert_eq!(block.dim(), 3);
    }

    #[test]
    fn write_read_round_trip() {
        let mut reg = VarRegistry::new();
        let p = reg.symmetric(3);
        let mut x = vec![0.0; reg.n_vars()];
        let m = Matrix::from_rows(&[&[1.0, 2.0, 3.0], &[2.0, 4.0, 5.0], &[3.0, 5.0, 6.0]]);
        p.write(&mut x, &m);
        assert_eq!(p.read(&x), m);
        let idx: Vec<usize> = (0..3).flat_map(|i| (i..3).map(move |j| (i, j))).map(|(i, j)| p.index(i, j)).collect();
        assert_eq!(idx, (0..6).collect::<Vec<_>>());
    }
}
