//! ADMM operator splitting for `min ½xᵀHx + cᵀx  s.t.  F_b(x) ⪯ −margin·I`.
//!
//! Each block is rewritten as `𝒜_b x + s_b = b_b` with the slack
//! `s_b = svec(−F_b(x) − margin·I)` in the PSD cone. Iterations alternate a
//! regularized least-squares step in `x` (one cached Cholesky factor), a PSD
//! projection of every slack block, and a scaled dual update.

use log::debug;
use serde::{Deserialize, Serialize};

use super::problem::{SdpProblem, SdpSolution, SdpStatus};
use super::svec::{smat_n, svec_index, svec_into, svec_len, SQRT2};
use crate::error::{Error, Result};
use crate::numlin::{sym_eig, sym_eig_warm, Cholesky, Matrix};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdmmSettings {
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub max_iters: usize,
    pub rho: f64,
    pub sigma: f64,
    /// Over-relaxation factor in (0, 2).
    pub alpha: f64,
    pub adaptive_rho: bool,
    pub adapt_interval: usize,
    pub check_interval: usize,
    pub scaling_iters: usize,
    /// Relative tolerance of the infeasibility certificate test.
    pub eps_infeasible: f64,
    /// Post-hoc tolerance: a point is reported feasible when every block
    /// satisfies `F(x) ⪯ (−margin + feas_tol)·I`.
    pub feas_tol: f64,
    /// How many times the internal margin may be tightened to turn an
    /// almost-feasible converged point into a verified one.
    pub tighten_rounds: usize,
}

impl Default for AdmmSettings {
    fn default() -> Self {
        AdmmSettings {
            eps_abs: 1e-7,
            eps_rel: 1e-7,
            max_iters: 50_000,
            rho: 1.0,
            sigma: 1e-6,
            alpha: 1.6,
            adaptive_rho: true,
            adapt_interval: 10,
            check_interval: 5,
            scaling_iters: 10,
            eps_infeasible: 1e-6,
            feas_tol: 1e-7,
            tighten_rounds: 4,
        }
    }
}

impl AdmmSettings {
    /// Looser settings for the many sequential solves inside iterative
    /// trainers.
    pub fn loose(eps: f64, max_iters: usize) -> Self {
        AdmmSettings {
            eps_abs: eps,
            eps_rel: eps,
            max_iters,
            ..Default::default()
        }
    }
}

/// Solver state that can seed a later solve of a problem with the same
/// structure. Stored unscaled.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct WarmStart {
    pub x: Vec<f64>,
    pub s: Vec<f64>,
    pub y: Vec<f64>,
    pub rho: f64,
}

struct Layout {
    offsets: Vec<usize>,
    dims: Vec<usize>,
    rows: usize,
}

impl Layout {
    fn block_of_rows(&self) -> impl Iterator<Item = (usize, std::ops::Range<usize>)> + '_ {
        self.dims.iter().enumerate().map(|(b, &d)| {
            let o = self.offsets[b];
            (b, o..o + svec_len(d))
        })
    }
}

/// Column-sparse constraint operator.
struct Op {
    cols: Vec<Vec<(usize, f64)>>,
}

impl Op {
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (j, col) in self.cols.iter().enumerate() {
            let xj = x[j];
            if xj == 0.0 {
                continue;
            }
            for &(r, v) in col {
                out[r] += v * xj;
            }
        }
    }

    fn apply_t(&self, y: &[f64], out: &mut [f64]) {
        for (j, col) in self.cols.iter().enumerate() {
            out[j] = col.iter().map(|&(r, v)| v * y[r]).sum();
        }
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Solves `problem`, optionally from a primal warm start.
pub fn solve(problem: &SdpProblem, x0: Option<&[f64]>) -> Result<SdpSolution> {
    let warm = x0.map(|x| WarmStart {
        x: x.to_vec(),
        ..Default::default()
    });
    Ok(solve_with(problem, &AdmmSettings::default(), warm.as_ref())?.0)
}

/// Full-control entry point returning the final state for warm starting.
pub fn solve_with(
    problem: &SdpProblem,
    settings: &AdmmSettings,
    warm: Option<&WarmStart>,
) -> Result<(SdpSolution, WarmStart)> {
    problem.validate()?;
    let mut eng = Engine::new(problem, settings)?;
    if let Some(w) = warm {
        eng.load_warm(w);
    }
    let sol = eng.run()?;
    let ws = eng.export_warm();
    Ok((sol, ws))
}

struct Engine<'a> {
    prob: &'a SdpProblem,
    set: &'a AdmmSettings,
    lay: Layout,
    a: Op,
    /// unscaled `−svec(F₀)`
    b0: Vec<f64>,
    /// `svec(I)` per row
    diag_ind: Vec<f64>,
    // scaling: x = D x̃, s̃ = E s, objective × c_s
    d: Vec<f64>,
    e_blk: Vec<f64>,
    e_row: Vec<f64>,
    c_s: f64,
    h: Option<Matrix>,
    c: Vec<f64>,
    gram: Matrix,
    b: Vec<f64>,
    margin_int: f64,
    rho: f64,
    chol: Option<Cholesky>,
    x: Vec<f64>,
    s: Vec<f64>,
    u: Vec<f64>,
    bases: Vec<Option<Matrix>>,
    iters: usize,
}

impl<'a> Engine<'a> {
    fn new(prob: &'a SdpProblem, set: &'a AdmmSettings) -> Result<Self> {
        let n = prob.n_vars;
        let mut offsets = Vec::with_capacity(prob.blocks.len());
        let mut dims = Vec::with_capacity(prob.blocks.len());
        let mut rows = 0;
        for blk in &prob.blocks {
            offsets.push(rows);
            dims.push(blk.dim());
            rows += svec_len(blk.dim());
        }
        let lay = Layout { offsets, dims, rows };

        let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        let mut b0 = vec![0.0; rows];
        let mut diag_ind = vec![0.0; rows];
        for (bi, blk) in prob.blocks.iter().enumerate() {
            let d = blk.dim();
            let off = lay.offsets[bi];
            svec_into(&blk.constant, &mut b0[off..off + svec_len(d)]);
            for i in 0..d {
                diag_ind[off + svec_index(d, i, i)] = 1.0;
            }
            for (var, sp) in blk.coefficients() {
                for &(i, j, v) in &sp.entries {
                    let r = off + svec_index(d, i, j);
                    let val = if i == j { v } else { SQRT2 * v };
                    cols[*var].push((r, val));
                }
            }
        }
        for col in &mut cols {
            col.sort_by_key(|e| e.0);
            let mut merged: Vec<(usize, f64)> = Vec::with_capacity(col.len());
            for &(r, v) in col.iter() {
                match merged.last_mut() {
                    Some(last) if last.0 == r => last.1 += v,
                    _ => merged.push((r, v)),
                }
            }
            *col = merged;
        }
        b0.iter_mut().for_each(|v| *v = -*v);

        let mut eng = Engine {
            prob,
            set,
            a: Op { cols },
            b0,
            diag_ind,
            d: vec![1.0; n],
            e_blk: vec![1.0; prob.blocks.len()],
            e_row: vec![1.0; rows],
            c_s: 1.0,
            h: prob.quadratic.clone(),
            c: prob.objective.clone(),
            gram: Matrix::zeros(0, 0),
            b: Vec::new(),
            margin_int: prob.margin,
            rho: set.rho,
            chol: None,
            x: vec![0.0; n],
            s: vec![0.0; rows],
            u: vec![0.0; rows],
            bases: vec![None; prob.blocks.len()],
            iters: 0,
            lay,
        };
        eng.equilibrate();
        eng.rebuild_b();
        eng.gram = eng.compute_gram();
        eng.factor()?;
        Ok(eng)
    }

    /// Ruiz equilibration with one scalar per block so the cone is preserved.
    fn equilibrate(&mut self) {
        let n = self.prob.n_vars;
        for _ in 0..self.set.scaling_iters {
            let mut col_norm = vec![0.0_f64; n];
            let mut blk_norm = vec![0.0_f64; self.lay.dims.len()];
            let row_blk = self.row_block_map();
            for (j, col) in self.a.cols.iter().enumerate() {
                for &(r, v) in col {
                    let a = v.abs();
                    col_norm[j] = col_norm[j].max(a);
                    blk_norm[row_blk[r]] = blk_norm[row_blk[r]].max(a);
                }
            }
            if let Some(h) = &self.h {
                for j in 0..n {
                    for i in 0..n {
                        col_norm[j] = col_norm[j].max(h.get(i, j).abs());
                    }
                }
            }
            let dj: Vec<f64> = col_norm
                .iter()
                .map(|&v| if v > 1e-12 { 1.0 / v.sqrt() } else { 1.0 })
                .collect();
            let eb: Vec<f64> = blk_norm
                .iter()
                .map(|&v| if v > 1e-12 { 1.0 / v.sqrt() } else { 1.0 })
                .collect();
            for (j, col) in self.a.cols.iter_mut().enumerate() {
                for e in col.iter_mut() {
                    e.1 *= dj[j] * eb[row_blk[e.0]];
                }
            }
            if let Some(h) = &mut self.h {
                for i in 0..n {
                    for j in 0..n {
                        h[(i, j)] *= dj[i] * dj[j];
                    }
                }
            }
            for j in 0..n {
                self.d[j] *= dj[j];
                self.c[j] *= dj[j];
            }
            for (bk, e) in eb.iter().enumerate() {
                self.e_blk[bk] *= e;
            }
        }
        for (bk, range) in self.lay.block_of_rows().collect::<Vec<_>>() {
            for r in range {
                self.e_row[r] = self.e_blk[bk];
            }
        }
        let mut cmax = inf_norm(&self.c);
        if let Some(h) = &self.h {
            let mean_col: f64 = (0..n)
                .map(|j| (0..n).fold(0.0_f64, |m, i| m.max(h.get(i, j).abs())))
                .sum::<f64>()
                / n.max(1) as f64;
            cmax = cmax.max(mean_col);
        }
        self.c_s = if cmax > 1e-12 { (1.0 / cmax).clamp(1e-4, 1e4) } else { 1.0 };
        self.c.iter_mut().for_each(|v| *v *= self.c_s);
        if let Some(h) = &mut self.h {
            *h = h.scale(self.c_s);
        }
    }

    fn row_block_map(&self) -> Vec<usize> {
        let mut m = vec![0; self.lay.rows];
        for (bk, range) in self.lay.block_of_rows() {
            for r in range {
                m[r] = bk;
            }
        }
        m
    }

    fn rebuild_b(&mut self) {
        self.b = (0..self.lay.rows)
            .map(|r| self.e_row[r] * (self.b0[r] - self.margin_int * self.diag_ind[r]))
            .collect();
    }

    fn compute_gram(&self) -> Matrix {
        let n = self.prob.n_vars;
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); self.lay.rows];
        for (j, col) in self.a.cols.iter().enumerate() {
            for &(r, v) in col {
                rows[r].push((j, v));
            }
        }
        let mut g = Matrix::zeros(n, n);
        for row in &rows {
            for (ai, &(i, vi)) in row.iter().enumerate() {
                for &(j, vj) in &row[ai..] {
                    g[(i, j)] += vi * vj;
                }
            }
        }
        for i in 0..n {
            for j in 0..i {
                let v = g[(j, i)] + g[(i, j)];
                g[(i, j)] = v;
                g[(j, i)] = v;
            }
        }
        g
    }

    fn factor(&mut self) -> Result<()> {
        let n = self.prob.n_vars;
        let mut k = self.gram.scale(self.rho);
        if let Some(h) = &self.h {
            k += h;
        }
        for i in 0..n {
            k[(i, i)] += self.set.sigma;
        }
        self.chol = Some(Cholesky::new(&k).map_err(|e| {
            Error::SolverAbort(format!("KKT factorization failed ({e}); quadratic term must be PSD"))
        })?);
        Ok(())
    }

    fn load_warm(&mut self, w: &WarmStart) {
        if w.x.len() == self.x.len() {
            for j in 0..self.x.len() {
                self.x[j] = w.x[j] / self.d[j];
            }
        }
        if w.rho > 0.0 && w.rho.is_finite() && w.rho != self.rho {
            self.rho = w.rho;
            if self.factor().is_err() {
                self.rho = self.set.rho;
                let _ = self.factor();
            }
        }
        if w.s.len() == self.s.len() && w.y.len() == self.u.len() {
            for r in 0..self.s.len() {
                self.s[r] = w.s[r] * self.e_row[r];
                self.u[r] = w.y[r] * self.c_s / self.e_row[r] / self.rho;
            }
        } else {
            // slack consistent with x, zero dual
            let mut ax = vec![0.0; self.lay.rows];
            self.a.apply(&self.x, &mut ax);
            let v: Vec<f64> = self.b.iter().zip(&ax).map(|(b, a)| b - a).collect();
            self.s = self.project(&v);
        }
    }

    fn export_warm(&self) -> WarmStart {
        WarmStart {
            x: self.x.iter().zip(&self.d).map(|(x, d)| x * d).collect(),
            s: self.s.iter().zip(&self.e_row).map(|(s, e)| s / e).collect(),
            y: self
                .u
                .iter()
                .zip(&self.e_row)
                .map(|(u, e)| u * self.rho * e / self.c_s)
                .collect(),
            rho: self.rho,
        }
    }

    fn project(&mut self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        for bk in 0..self.lay.dims.len() {
            let d = self.lay.dims[bk];
            let off = self.lay.offsets[bk];
            let len = svec_len(d);
            let seg = &v[off..off + len];
            if d == 1 {
                out[off] = seg[0].max(0.0);
                continue;
            }
            let m = smat_n(seg, d);
            if Cholesky::new(&m).is_ok() {
                out[off..off + len].copy_from_slice(seg);
                continue;
            }
            let eig = match &self.bases[bk] {
                Some(basis) => sym_eig_warm(&m, basis),
                None => sym_eig(&m),
            };
            let eig = match eig {
                Ok(e) => e,
                Err(_) => {
                    // non-finite input; leave the slack at zero and let the
                    // residual checks report divergence
                    continue;
                }
            };
            let p = eig.reconstruct_with(|l| l.max(0.0));
            svec_into(&p, &mut out[off..off + len]);
            self.bases[bk] = Some(eig.eigenvectors);
        }
        out
    }

    fn unscaled_x(&self) -> Vec<f64> {
        self.x.iter().zip(&self.d).map(|(x, d)| x * d).collect()
    }

    fn run(&mut self) -> Result<SdpSolution> {
        let n = self.prob.n_vars;
        let m = self.lay.rows;
        let alpha = self.set.alpha;
        let mut ax = vec![0.0; m];
        let mut tmp = vec![0.0; m];
        let mut rhs = vec![0.0; n];
        let mut aty = vec![0.0; n];
        let mut u_prev = self.u.clone();
        let mut tighten_left = self.set.tighten_rounds;
        let mut last_rp = f64::INFINITY;
        let mut last_rd = f64::INFINITY;
        let mut status = SdpStatus::MaxIterations;

        while self.iters < self.set.max_iters {
            self.iters += 1;
            // x-step
            for r in 0..m {
                tmp[r] = self.s[r] - self.b[r] + self.u[r];
            }
            self.a.apply_t(&tmp, &mut aty);
            for j in 0..n {
                rhs[j] = self.set.sigma * self.x[j] - self.c[j] - self.rho * aty[j];
            }
            self.chol.as_ref().expect("factored").solve_in_place(&mut rhs);
            self.x.copy_from_slice(&rhs);
            self.a.apply(&self.x, &mut ax);
            // s-step with over-relaxation
            for r in 0..m {
                let h = alpha * ax[r] + (1.0 - alpha) * (self.b[r] - self.s[r]);
                tmp[r] = h;
            }
            let v: Vec<f64> = (0..m).map(|r| self.b[r] - tmp[r] - self.u[r]).collect();
            let s_new = self.project(&v);
            u_prev.copy_from_slice(&self.u);
            for r in 0..m {
                self.u[r] += tmp[r] + s_new[r] - self.b[r];
            }
            self.s = s_new;

            let check = self.iters % self.set.check_interval == 0 || self.iters == self.set.max_iters;
            if !check {
                continue;
            }
            if !self.x.iter().all(|v| v.is_finite()) || !self.u.iter().all(|v| v.is_finite()) {
                return Err(Error::SolverAbort("ADMM iterates became non-finite".into()));
            }
            let (rp, rp_tol, rd, rd_tol) = self.residuals(&ax);
            last_rp = rp;
            last_rd = rd;

            if rp <= rp_tol && rd <= rd_tol {
                let x = self.unscaled_x();
                let viol = self.prob.max_violation(&x)?;
                if viol <= self.set.feas_tol {
                    status = SdpStatus::Feasible;
                    break;
                }
                if tighten_left == 0 {
                    debug!("ADMM converged but post-hoc check failed by {viol:e}");
                    break;
                }
                tighten_left -= 1;
                self.margin_int += 2.0 * viol + 1e-10;
                self.rebuild_b();
                continue;
            }
            if self.iters >= 50 && self.infeasibility_certificate(&u_prev)? {
                status = SdpStatus::InfeasibleCertifiedHeuristically;
                break;
            }
            if self.set.adaptive_rho && self.iters % self.set.adapt_interval == 0 {
                let ratio = (rp / rp_tol.max(1e-300)) / (rd / rd_tol.max(1e-300)).max(1e-300);
                let old = self.rho;
                if ratio > 10.0 && self.rho < 1e6 {
                    self.rho *= 2.0;
                } else if ratio < 0.1 && self.rho > 1e-6 {
                    self.rho *= 0.5;
                }
                if self.rho != old {
                    let f = old / self.rho;
                    self.u.iter_mut().for_each(|v| *v *= f);
                    self.factor()?;
                }
            }
        }

        let x = self.unscaled_x();
        let max_violation = self.prob.max_violation(&x)?;
        Ok(SdpSolution {
            objective: self.prob.objective_value(&x),
            x,
            status,
            primal_residual: last_rp,
            dual_residual: last_rd,
            iterations: self.iters,
            max_violation,
        })
    }

    /// Unscaled primal and dual residual norms with their tolerances.
    fn residuals(&self, ax: &[f64]) -> (f64, f64, f64, f64) {
        let n = self.prob.n_vars;
        let m = self.lay.rows;
        let mut rp = 0.0_f64;
        let mut pscale = 0.0_f64;
        for r in 0..m {
            let e = self.e_row[r];
            rp = rp.max(((ax[r] + self.s[r] - self.b[r]) / e).abs());
            pscale = pscale
                .max((ax[r] / e).abs())
                .max((self.s[r] / e).abs())
                .max((self.b[r] / e).abs());
        }
        let y: Vec<f64> = self.u.iter().map(|u| self.rho * u).collect();
        let mut aty = vec![0.0; n];
        self.a.apply_t(&y, &mut aty);
        let hx = match &self.h {
            Some(h) => h.matvec(&self.x).expect("shape"),
            None => vec![0.0; n],
        };
        let mut rd = 0.0_f64;
        let mut dscale = 0.0_f64;
        for j in 0..n {
            let k = 1.0 / (self.d[j] * self.c_s);
            rd = rd.max(((hx[j] + self.c[j] + aty[j]) * k).abs());
            dscale = dscale
                .max((hx[j] * k).abs())
                .max((self.c[j] * k).abs())
                .max((aty[j] * k).abs());
        }
        let set = self.set;
        (
            rp,
            set.eps_abs + set.eps_rel * pscale,
            rd,
            set.eps_abs + set.eps_rel * dscale,
        )
    }

    /// Tests whether the last dual increment certifies primal infeasibility:
    /// `δy ⪰ 0`, `𝒜ᵀδy ≈ 0` and `⟨b, δy⟩ < 0`.
    fn infeasibility_certificate(&self, u_prev: &[f64]) -> Result<bool> {
        let n = self.prob.n_vars;
        let m = self.lay.rows;
        let dy: Vec<f64> = (0..m)
            .map(|r| self.rho * (self.u[r] - u_prev[r]) * self.e_row[r] / self.c_s)
            .collect();
        let norm = inf_norm(&dy);
        if norm < 1e-12 {
            return Ok(false);
        }
        let eps = self.set.eps_infeasible;
        // 𝒜ᵀδy in original units: D⁻¹ Ãᵀ δỹ / c_s with δỹ = c_s E⁻¹ δy
        let dy_s: Vec<f64> = (0..m).map(|r| dy[r] * self.c_s / self.e_row[r]).collect();
        let mut at = vec![0.0; n];
        self.a.apply_t(&dy_s, &mut at);
        let at_norm = (0..n).fold(0.0_f64, |acc, j| acc.max((at[j] / (self.d[j] * self.c_s)).abs()));
        let bty: f64 = (0..m)
            .map(|r| (self.b0[r] - self.margin_int * self.diag_ind[r]) * dy[r])
            .sum();
        if at_norm > eps * norm || bty > -eps * norm {
            return Ok(false);
        }
        for bk in 0..self.lay.dims.len() {
            let d = self.lay.dims[bk];
            let off = self.lay.offsets[bk];
            let mm = smat_n(&dy[off..off + svec_len(d)], d);
            if sym_eig(&mm)?.min() < -eps * norm * 10.0 {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lmi::problem::LmiBlock;

    fn two_by_two_problem() -> SdpProblem {
        // [[x,1],[1,x]] ⪰ 0  ⇔  [[−x,−1],[−1,−x]] ⪯ 0
        let mut b = LmiBlock::new(Matrix::from_rows(&[&[0.0, -1.0], &[-1.0, 0.0]])).unwrap();
        b.add_coefficient(0, &Matrix::from_diag(&[-1.0, -1.0])).unwrap();
        SdpProblem {
            n_vars: 1,
            objective: vec![1.0],
            quadratic: None,
            blocks: vec![b],
            margin: 0.0,
        }
    }

    #[test]
    fn minimizes_over_two_by_two() {
        let sol = solve(&two_by_two_problem(), None).unwrap();
        assert_eq!(sol.status, SdpStatus::Feasible);
        // det = x² − 1 ≥ 0 with x ≥ 0
        assert!((sol.x[0] - 1.0).abs() < 1e-5, "x = {}", sol.x[0]);
    }

    #[test]
    fn interval_feasibility() {
        let mut b1 = LmiBlock::new(Matrix::from_diag(&[-1.0, -1.0])).unwrap();
        b1.add_coefficient(0, &Matrix::identity(2)).unwrap();
        let mut b2 = LmiBlock::new(Matrix::scalar(0.0)).unwrap();
        b2.add_coefficient(0, &Matrix::scalar(-1.0)).unwrap();
        let p = SdpProblem::feasibility(1, vec![b1, b2], 0.0);
        let sol = solve(&p, Some(&[0.5])).unwrap();
        assert_eq!(sol.status, SdpStatus::Feasible);
        assert!(sol.x[0] >= -1e-7 && sol.x[0] <= 1.0 + 1e-7);
    }

    #[test]
    fn constant_identity_is_infeasible() {
        let b = LmiBlock::new(Matrix::identity(2)).unwrap();
        let sol = solve(&SdpProblem::feasibility(0, vec![b], 0.0), None).unwrap();
        assert_eq!(sol.status, SdpStatus::InfeasibleCertifiedHeuristically);
    }

    #[test]
    fn warm_start_reduces_iterations() {
        let p = two_by_two_problem();
        let (cold, ws) = solve_with(&p, &AdmmSettings::default(), None).unwrap();
        let (warm, _) = solve_with(&p, &AdmmSettings::default(), Some(&ws)).unwrap();
        assert_eq!(warm.status, SdpStatus::Feasible);
        assert!(warm.iterations <= cold.iterations);
    }
}
