//! Primal-dual interior point method (HKM direction, Mehrotra
//! predictor-corrector) for the same problems as the ADMM engine. Used where
//! many accurate solves of medium-size problems are needed in sequence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numlin::{sym_eig, Cholesky, Matrix};

use super::problem::{SdpProblem, SdpSolution, SdpStatus, SparseSym};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IpmSettings {
    /// Relative tolerance on primal residual, dual residual and gap.
    pub tol: f64,
    pub max_iters: usize,
    /// Fraction of the distance to the cone boundary taken per step.
    pub step_frac: f64,
    /// Post-hoc tolerance on `max_b λ_max(F_b(x)) + margin`.
    pub feas_tol: f64,
}

impl Default for IpmSettings {
    fn default() -> Self {
        IpmSettings {
            tol: 1e-9,
            max_iters: 80,
            step_frac: 0.98,
            feas_tol: 1e-7,
        }
    }
}

fn inner(f: &SparseSym, x: &Matrix) -> f64 {
    f.entries
        .iter()
        .map(|&(i, j, v)| if i == j { v * x.get(i, i) } else { v * (x.get(i, j) + x.get(j, i)) })
        .sum()
}

fn inverse_from_chol(ch: &Cholesky, n: usize) -> Matrix {
    let mut inv = Matrix::zeros(n, n);
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        ch.solve_in_place(&mut e);
        for i in 0..n {
            inv.set(i, j, e[i]);
        }
    }
    inv.symmetrize().unwrap_or(inv)
}

/// `L⁻¹ D L⁻ᵀ` for lower-triangular `L`.
fn congruence_inv(l: &Matrix, d: &Matrix) -> Matrix {
    let n = l.rows();
    let fwd = |m: &Matrix| {
        // solve L Y = M column by column
        let mut y = m.clone();
        for c in 0..n {
            for i in 0..n {
                let mut s = y.get(i, c);
                for k in 0..i {
                    s -= l.get(i, k) * y.get(k, c);
                }
                y.set(i, c, s / l.get(i, i));
            }
        }
        y
    };
    let y = fwd(d);
    fwd(&y.transpose())
}

/// Largest `α ∈ (0, 1]` with `X + α dX ⪰ 0`, for `X = LLᵀ ≻ 0`.
fn max_step(l: &Matrix, dx: &Matrix) -> Result<f64> {
    if dx.rows() == 0 {
        return Ok(1.0);
    }
    let m = congruence_inv(l, dx).symmetrize()?;
    let lo = sym_eig(&m)?.min();
    Ok(if lo >= 0.0 { f64::INFINITY } else { -1.0 / lo })
}

struct Block<'a> {
    c: Matrix,
    coefs: &'a [(usize, SparseSym)],
    d: usize,
}

impl Block<'_> {
    fn apply(&self, x: &[f64]) -> Matrix {
        let mut m = Matrix::zeros(self.d, self.d);
        for (v, sp) in self.coefs {
            if x[*v] != 0.0 {
                sp.add_scaled_to(&mut m, x[*v]);
            }
        }
        m
    }

    /// `(S⁻¹ F_j Z)` for one coefficient.
    fn sfz(&self, sinv: &Matrix, z: &Matrix, f: &SparseSym) -> Matrix {
        let d = self.d;
        let nnz = f.entries.len();
        if 2 * nnz >= d {
            let fd = f.to_dense(d);
            return &(sinv * &fd) * z;
        }
        let mut t = Matrix::zeros(d, d);
        let data = t.data_mut();
        for &(a, b, v) in &f.entries {
            for (p, q) in if a == b { vec![(a, b)] } else { vec![(a, b), (b, a)] } {
                for r in 0..d {
                    let s = v * sinv.get(r, p);
                    if s == 0.0 {
                        continue;
                    }
                    let zr = z.row_slice(q);
                    let row = &mut data[r * d..(r + 1) * d];
                    for c in 0..d {
                        row[c] += s * zr[c];
                    }
                }
            }
        }
        t
    }
}

/// Solves `min ½xᵀHx + cᵀx` s.t. `F_b(x) ⪯ −margin·I` from the start point
/// `x0` (slacks and multipliers start at scaled identities).
pub fn solve_ipm(problem: &SdpProblem, settings: &IpmSettings, x0: Option<&[f64]>) -> Result<SdpSolution> {
    problem.validate()?;
    let n = problem.n_vars;
    let blocks: Vec<Block> = problem
        .blocks
        .iter()
        .map(|b| {
            let mut c = b.constant.clone();
            for i in 0..b.dim() {
                c[(i, i)] += problem.margin;
            }
            Block {
                c,
                coefs: b.coefficients(),
                d: b.dim(),
            }
        })
        .collect();
    let total_dim: usize = blocks.iter().map(|b| b.d).sum::<usize>().max(1);
    let h = problem.quadratic.clone();
    let c = &problem.objective;
    let c_norm = c.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let b_norm = blocks.iter().fold(0.0_f64, |m, b| m.max(b.c.max_abs()));

    let mut x: Vec<f64> = match x0 {
        Some(x0) if x0.len() == n => x0.to_vec(),
        _ => vec![0.0; n],
    };
    let mut s: Vec<Matrix> = Vec::with_capacity(blocks.len());
    let mut z: Vec<Matrix> = Vec::with_capacity(blocks.len());
    for b in &blocks {
        let theta = 1.0 + b.c.max_abs().sqrt();
        let s0 = &(&b.c + &b.apply(&x)).scale(-1.0);
        // keep a feasible start slack when it is comfortably interior
        let lo = if b.d > 0 { sym_eig(s0)?.min() } else { 1.0 };
        if lo > 1e-8 * theta {
            let ch = Cholesky::new(s0).map_err(|_| Error::SolverAbort("start slack".into()))?;
            z.push(inverse_from_chol(&ch, b.d));
            s.push(s0.clone());
        } else {
            s.push(Matrix::identity(b.d).scale(theta));
            z.push(Matrix::identity(b.d).scale(theta));
        }
    }

    let mut status = SdpStatus::MaxIterations;
    let mut iters = 0;
    let mut rp_norm = f64::INFINITY;
    let mut rd_norm = f64::INFINITY;
    while iters < settings.max_iters {
        // residuals
        let ax: Vec<Matrix> = blocks.iter().map(|b| b.apply(&x)).collect();
        let rp: Vec<Matrix> = blocks
            .iter()
            .enumerate()
            .map(|(k, b)| &(&b.c + &ax[k]) + &s[k])
            .collect();
        let mut rd = match &h {
            Some(h) => h.matvec(&x)?,
            None => vec![0.0; n],
        };
        for (j, v) in rd.iter_mut().enumerate() {
            *v += c[j];
        }
        for (k, b) in blocks.iter().enumerate() {
            for (v, sp) in b.coefs {
                rd[*v] += inner(sp, &z[k]);
            }
        }
        let gap: f64 = s.iter().zip(&z).map(|(s, z)| s.data().iter().zip(z.data()).map(|(a, b)| a * b).sum::<f64>()).sum();
        let mu = gap / total_dim as f64;
        rp_norm = rp.iter().fold(0.0_f64, |m, r| m.max(r.max_abs()));
        rd_norm = rd.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let pobj = problem.objective_value(&x);
        if !pobj.is_finite() || !mu.is_finite() {
            return Err(Error::SolverAbort("interior point iterates became non-finite".into()));
        }
        if rp_norm <= settings.tol * (1.0 + b_norm)
            && rd_norm <= settings.tol * (1.0 + c_norm)
            && gap <= settings.tol * (1.0 + pobj.abs())
        {
            if problem.max_violation(&x)? <= settings.feas_tol {
                status = SdpStatus::Feasible;
            }
            break;
        }
        iters += 1;

        // Schur complement
        let mut chols = Vec::with_capacity(blocks.len());
        let mut zchols = Vec::with_capacity(blocks.len());
        let mut sinv = Vec::with_capacity(blocks.len());
        let mut lost = false;
        for (sk, zk) in s.iter().zip(&z) {
            match (Cholesky::new(sk), Cholesky::new(zk)) {
                (Ok(cs), Ok(cz)) => {
                    sinv.push(inverse_from_chol(&cs, sk.rows()));
                    chols.push(cs);
                    zchols.push(cz);
                }
                _ => lost = true,
            }
        }
        if lost {
            // rounding pushed an iterate onto the cone boundary
            break;
        }
        let mut m = match &h {
            Some(h) => h.clone(),
            None => Matrix::zeros(n, n),
        };
        for (k, b) in blocks.iter().enumerate() {
            for (vj, fj) in b.coefs {
                let t = b.sfz(&sinv[k], &z[k], fj);
                for (vi, fi) in b.coefs {
                    let val = inner(fi, &t);
                    m[(*vi, *vj)] += val;
                }
            }
        }
        let m = m.symmetrize()?;
        let scale = (0..n).fold(0.0_f64, |a, i| a.max(m.get(i, i).abs())).max(1.0);
        let mut reg = 1e-14 * scale;
        let chol_m = loop {
            let mut mr = m.clone();
            for i in 0..n {
                mr[(i, i)] += reg;
            }
            match Cholesky::new(&mr) {
                Ok(ch) => break ch,
                Err(_) if reg < 1e-4 * scale => reg *= 100.0,
                Err(_) => return Err(Error::SolverAbort("Schur complement is not positive definite".into())),
            }
        };

        // direction for a complementarity target T
        let direction = |targets: &[Matrix]| -> Result<(Vec<f64>, Vec<Matrix>, Vec<Matrix>)> {
            let mut rhs: Vec<f64> = rd.iter().map(|v| -v).collect();
            let mut g_blocks = Vec::with_capacity(blocks.len());
            for (k, b) in blocks.iter().enumerate() {
                // G = S⁻¹T − Z + S⁻¹ r_p Z
                let g = &(&(&sinv[k] * &targets[k]) - &z[k]) + &(&(&sinv[k] * &rp[k]) * &z[k]);
                for (v, sp) in b.coefs {
                    rhs[*v] -= inner(sp, &g);
                }
                g_blocks.push(g);
            }
            chol_m.solve_in_place(&mut rhs);
            let dx = rhs;
            let mut ds = Vec::with_capacity(blocks.len());
            let mut dz = Vec::with_capacity(blocks.len());
            for (k, b) in blocks.iter().enumerate() {
                let adx = b.apply(&dx);
                let dsk = (&rp[k] + &adx).scale(-1.0);
                let q = &(&(&sinv[k] * &targets[k]) - &z[k]) + &(&(&sinv[k] * &(&rp[k] + &adx)) * &z[k]);
                dz.push(q.symmetrize()?);
                ds.push(dsk);
            }
            Ok((dx, ds, dz))
        };
        let step_len = |ds: &[Matrix], dz: &[Matrix]| -> Result<f64> {
            let mut a = f64::INFINITY;
            for k in 0..blocks.len() {
                a = a.min(max_step(chols[k].factor(), &ds[k])?);
                a = a.min(max_step(zchols[k].factor(), &dz[k])?);
            }
            Ok(a)
        };

        // predictor
        let zeros: Vec<Matrix> = blocks.iter().map(|b| Matrix::zeros(b.d, b.d)).collect();
        let (_, ds_a, dz_a) = direction(&zeros)?;
        let a_aff = step_len(&ds_a, &dz_a)?.min(1.0);
        let gap_aff: f64 = (0..blocks.len())
            .map(|k| {
                let sa = &s[k] + &ds_a[k].scale(a_aff);
                let za = &z[k] + &dz_a[k].scale(a_aff);
                sa.data().iter().zip(za.data()).map(|(a, b)| a * b).sum::<f64>()
            })
            .sum();
        let sigma = ((gap_aff / gap.max(1e-300)).max(0.0)).powi(3).min(1.0);
        // corrector
        let targets: Vec<Matrix> = (0..blocks.len())
            .map(|k| &Matrix::identity(blocks[k].d).scale(sigma * mu) - &(&ds_a[k] * &dz_a[k]))
            .collect();
        let (dx, ds, dz) = direction(&targets)?;
        let alpha = (settings.step_frac * step_len(&ds, &dz)?).min(1.0);
        for (xj, d) in x.iter_mut().zip(&dx) {
            *xj += alpha * d;
        }
        for k in 0..blocks.len() {
            s[k] = (&s[k] + &ds[k].scale(alpha)).symmetrize()?;
            z[k] = (&z[k] + &dz[k].scale(alpha)).symmetrize()?;
        }
        if x.iter().any(|v| !v.is_finite() || v.abs() > 1e12) {
            status = SdpStatus::InfeasibleCertifiedHeuristically;
            break;
        }
    }
    let max_violation = problem.max_violation(&x)?;
    if status == SdpStatus::MaxIterations && max_violation <= settings.feas_tol {
        // accept a stalled run that reached the square root of the tolerance
        let loose = settings.tol.sqrt();
        let pobj = problem.objective_value(&x);
        let gap: f64 = s.iter().zip(&z).map(|(s, z)| s.data().iter().zip(z.data()).map(|(a, b)| a * b).sum::<f64>()).sum();
        if rp_norm <= loose * (1.0 + b_norm) && rd_norm <= loose * (1.0 + c_norm) && gap <= loose * (1.0 + pobj.abs()) {
            status = SdpStatus::Feasible;
        }
    }
    Ok(SdpSolution {
        objective: problem.objective_value(&x),
        x,
        status,
        primal_residual: rp_norm,
        dual_residual: rd_norm,
        iterations: iters,
        max_violation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lmi::{LmiBlock, SdpProblem};

    #[test]
    fn two_by_two_oracle() {
        // min x s.t. [[x,1],[1,x]] ⪰ 0  ⇔  [[−x,−1],[−1,−x]] ⪯ 0
        let mut b = LmiBlock::new(Matrix::from_rows(&[&[0.0, -1.0], &[-1.0, 0.0]])).unwrap();
        b.add_coefficient(0, &Matrix::from_rows(&[&[-1.0, 0.0], &[0.0, -1.0]])).unwrap();
        let p = SdpProblem {
            n_vars: 1,
            objective: vec![1.0],
            quadratic: None,
            blocks: vec![b],
            margin: 0.0,
        };
        let sol = solve_ipm(&p, &IpmSettings::default(), None).unwrap();
        assert!(sol.is_feasible());
        assert!((sol.x[0] - 1.0).abs() < 1e-7, "{}", sol.x[0]);
    }

    #[test]
    fn projection_matches_admm() {
        // nearest point to (2, 2) with [[x₀ − 1, x₁], [x₁, −1]] ⪯ 0
        let mut b = LmiBlock::new(Matrix::from_rows(&[&[-1.0, 0.0], &[0.0, -1.0]])).unwrap();
        b.add_coefficient(0, &Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]])).unwrap();
        b.add_coefficient(1, &Matrix::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]])).unwrap();
        let p = crate::lmi::projection_problem(&[2.0, 2.0], None, vec![b], 0.0);
        let ipm = solve_ipm(&p, &IpmSettings::default(), None).unwrap();
        let admm = crate::lmi::solve(&p, None).unwrap();
        assert!(ipm.is_feasible());
        for i in 0..2 {
            assert!((ipm.x[i] - admm.x[i]).abs() < 1e-4, "{:?} vs {:?}", ipm.x, admm.x);
        }
    }
}
