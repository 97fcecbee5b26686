//! A small semidefinite programming engine for LMI feasibility, linear or
//! convex-quadratic objectives, and Euclidean projection onto spectrahedra.

pub mod admm;
pub mod ipm;
pub mod affine;
pub mod problem;
pub mod svec;

pub use admm::{solve, solve_with, AdmmSettings, WarmStart};
pub use ipm::{solve_ipm, IpmSettings};
pub use affine::{AffExpr, AffMat, VarMat, VarRegistry};
pub use problem::{LmiBlock, SdpProblem, SdpSolution, SdpStatus, SparseSym};
pub use svec::{smat, svec, svec_len};

use crate::error::Result;
use crate::numlin::Matrix;

/// Quadratic program `min ½‖W(x − target)‖²` over the blocks, with
/// per-coordinate weights `W = diag(weights)`.
pub fn projection_problem(target: &[f64], weights: Option<&[f64]>, blocks: Vec<LmiBlock>, margin: f64) -> SdpProblem {
    let n = target.len();
    let w: Vec<f64> = match weights {
        Some(w) => w.iter().map(|v| v * v).collect(),
        None => vec![1.0; n],
    };
    SdpProblem {
        n_vars: n,
        objective: target.iter().zip(&w).map(|(t, w)| -t * w).collect(),
        quadratic: Some(Matrix::from_diag(&w)),
        blocks,
        margin,
    }
}

/// Euclidean projection of `target` onto `{x : F_b(x) ⪯ −margin·I ∀b}`.
pub fn project(target: &[f64], blocks: Vec<LmiBlock>, margin: f64) -> Result<SdpSolution> {
    let p = projection_problem(target, None, blocks, margin);
    let warm = WarmStart {
        x: target.to_vec(),
        ..Default::default()
    };
    Ok(solve_with(&p, &AdmmSettings::default(), Some(&warm))?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_clamp() {
        // x ≤ 1  ⇔  x − 1 ⪯ 0
        let mut b = LmiBlock::new(Matrix::scalar(-1.0)).unwrap();
        b.add_coefficient(0, &Matrix::scalar(1.0)).unwrap();
        let sol = project(&[3.0], vec![b.clone()], 0.0).unwrap();
        assert!(sol.is_feasible());
        assert!((sol.x[0] - 1.0).abs() < 1e-6);
        let sol = project(&[0.25], vec![b], 0.0).unwrap();
        assert!((sol.x[0] - 0.25).abs() < 1e-6);
    }

    #[test]
    fn ball_projection() {
        // [[1, x₁, x₂],[x₁, 1, 0],[x₂, 0, 1]] ⪰ 0  ⇔  x₁² + x₂² ≤ 1
        let mut b = LmiBlock::new(Matrix::from_diag(&[-1.0, -1.0, -1.0])).unwrap();
        let mut e1 = Matrix::zeros(3, 3);
        e1[(0, 1)] = -1.0;
        e1[(1, 0)] = -1.0;
        let mut e2 = Matrix::zeros(3, 3);
        e2[(0, 2)] = -1.0;
        e2[(2, 0)] = -1.0;
        b.add_coefficient(0, &e1).unwrap();
        b.add_coefficient(1, &e2).unwrap();
        let sol = project(&[3.0, 0.0], vec![b], 0.0).unwrap();
        assert!(sol.is_feasible());
        assert!((sol.x[0] - 1.0).abs() < 1e-5 && sol.x[1].abs() < 1e-5, "{:?}", sol.x);
    }
}
