use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numlin::{max_eigenvalue, Matrix};

/// Symmetric coefficient matrix stored as its upper-triangle entries.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseSym {
    /// `(i, j, value)` with `i ≤ j`.
    pub entries: Vec<(usize, usize, f64)>,
}

impl SparseSym {
    pub fn from_dense(m: &Matrix) -> SparseSym {
        let n = m.rows();
        let mut entries = Vec::new();
        for i in 0..n {
            for j in i..n {
                let v = 0.5 * (m.get(i, j) + m.get(j, i));
                if v != 0.0 {
                    entries.push((i, j, v));
                }
            }
        }
        SparseSym { entries }
    }

    pub fn to_dense(&self, n: usize) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        self.add_scaled_to(&mut m, 1.0);
        m
    }

    pub fn add_scaled_to(&self, m: &mut Matrix, s: f64) {
        for &(i, j, v) in &self.entries {
            m[(i, j)] += s * v;
            if i != j {
                m[(j, i)] += s * v;
            }
        }
    }
}

/// Affine symmetric matrix function `F(x) = F₀ + Σᵢ xᵢ Fᵢ`, constrained to
/// `F(x) ⪯ −margin·I` inside an [`SdpProblem`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmiBlock {
    pub constant: Matrix,
    coefficients: Vec<(usize, SparseSym)>,
    /// Free-form tag used for diagnostics and bookkeeping.
    pub label: String,
}

impl LmiBlock {
    pub fn new(constant: Matrix) -> Result<LmiBlock> {
        if !constant.is_square() {
            return Err(dim_err("block constant must be square"));
        }
        constant.ensure_finite("block constant")?;
        Ok(LmiBlock {
            constant: constant.symmetrize()?,
            coefficients: Vec::new(),
            label: String::new(),
        })
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn dim(&self) -> usize {
        self.constant.rows()
    }

    /// Adds `x_var · m` to the block. Repeated variables accumulate.
    pub fn add_coefficient(&mut self, var: usize, m: &Matrix) -> Result<()> {
        if m.shape() != self.constant.shape() {
            return Err(dim_err(format!(
                "coefficient {}x{} does not match block dimension {}",
                m.rows(),
                m.cols(),
                self.dim()
            )));
        }
        m.ensure_finite("block coefficient")?;
        let sp = SparseSym::from_dense(m);
        self.push_sparse(var, sp);
        Ok(())
    }

    pub(crate) fn push_sparse(&mut self, var: usize, sp: SparseSym) {
        if sp.entries.is_empty() {
            return;
        }
        match self.coefficients.iter_mut().find(|(v, _)| *v == var) {
            Some((_, existing)) => {
                let mut merged: BTreeMap<(usize, usize), f64> = BTreeMap::new();
                for &(i, j, v) in existing.entries.iter().chain(&sp.entries) {
                    *merged.entry((i, j)).or_insert(0.0) += v;
                }
                existing.entries = merged
                    .into_iter()
                    .filter(|(_, v)| *v != 0.0)
                    .map(|((i, j), v)| (i, j, v))
                    .collect();
            }
            None => self.coefficients.push((var, sp)),
        }
    }

    pub fn coefficients(&self) -> &[(usize, SparseSym)] {
        &self.coefficients
    }

    /// Dense coefficient of `var`, zero when absent.
    pub fn coefficient(&self, var: usize) -> Matrix {
        let n = self.dim();
        self.coefficients
            .iter()
            .filter(|(v, _)| *v == var)
            .fold(Matrix::zeros(n, n), |mut acc, (_, sp)| {
                sp.add_scaled_to(&mut acc, 1.0);
                acc
            })
    }

    pub fn max_var(&self) -> Option<usize> {
        self.coefficients.iter().map(|(v, _)| *v).max()
    }

    pub fn evaluate(&self, x: &[f64]) -> Matrix {
        let mut m = self.constant.clone();
        for (v, sp) in &self.coefficients {
            let xv = x.get(*v).copied().unwrap_or(0.0);
            if xv != 0.0 {
                sp.add_scaled_to(&mut m, xv);
            }
        }
        m
    }

    /// Largest eigenvalue of `F(x)`; `≤ 0` means the block holds.
    pub fn max_eig_at(&self, x: &[f64]) -> Result<f64> {
        if self.dim() == 0 {
            return Ok(f64::NEG_INFINITY);
        }
        max_eigenvalue(&self.evaluate(x))
    }

    /// Largest absolute entry over the constant and all coefficients.
    pub fn magnitude(&self) -> f64 {
        self.coefficients
            .iter()
            .flat_map(|(_, sp)| sp.entries.iter().map(|e| e.2.abs()))
            .fold(self.constant.max_abs(), f64::max)
    }
}

/// `min ½xᵀHx + cᵀx` subject to `F_b(x) ⪯ −margin·I` for every block.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SdpProblem {
    pub n_vars: usize,
    pub objective: Vec<f64>,
    /// Optional PSD quadratic term; used for projections and for objectives
    /// that carry exact convex quadratics.
    pub quadratic: Option<Matrix>,
    pub blocks: Vec<LmiBlock>,
    pub margin: f64,
}

impl SdpProblem {
    pub fn feasibility(n_vars: usize, blocks: Vec<LmiBlock>, margin: f64) -> SdpProblem {
        SdpProblem {
            n_vars,
            objective: vec![0.0; n_vars],
            quadratic: None,
            blocks,
            margin,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.objective.len() != self.n_vars {
            return Err(dim_err("objective length differs from n_vars"));
        }
        if self.blocks.is_empty() {
            return Err(Error::Precondition("problem has no blocks".into()));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::Precondition("margin must be non-negative".into()));
        }
        if let Some(h) = &self.quadratic {
            if h.shape() != (self.n_vars, self.n_vars) {
                return Err(dim_err("quadratic term has the wrong shape"));
            }
            h.ensure_finite("quadratic term")?;
        }
        if self.objective.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("objective".into()));
        }
        for (k, b) in self.blocks.iter().enumerate() {
            if let Some(v) = b.max_var() {
                if v >= self.n_vars {
                    return Err(dim_err(format!("block {k} references variable {v} ≥ {}", self.n_vars)));
                }
            }
        }
        Ok(())
    }

    pub fn objective_value(&self, x: &[f64]) -> f64 {
        let lin: f64 = self.objective.iter().zip(x).map(|(c, x)| c * x).sum();
        let quad = match &self.quadratic {
            Some(h) => 0.5 * crate::numlin::dot(x, &h.matvec(x).expect("validated shape")),
            None => 0.0,
        };
        lin + quad
    }

    /// `max_b λ_max(F_b(x)) + margin`; non-positive when every block holds.
    pub fn max_violation(&self, x: &[f64]) -> Result<f64> {
        let mut worst = f64::NEG_INFINITY;
        for b in &self.blocks {
            worst = worst.max(b.max_eig_at(x)? + self.margin);
        }
        Ok(worst)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SdpStatus {
    Feasible,
    InfeasibleCertifiedHeuristically,
    MaxIterations,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SdpSolution {
    pub x: Vec<f64>,
    pub status: SdpStatus,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub iterations: usize,
    pub objective: f64,
    /// `max_b λ_max(F_b(x)) + margin` at the returned point.
    pub max_violation: f64,
}

impl SdpSolution {
    pub fn is_feasible(&self) -> bool {
        self.status == SdpStatus::Feasible
    }
}
