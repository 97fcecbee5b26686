//! Convex surrogate of the two-step imitation loss around a controller
//! `θ₀ = (Â₀, B̂₀, Ĉ₀, D̂₀)` with decision variables `δ = (δÂ, δB̂, δĈ, δD̂)`.
//!
//! With `z = x̂₀`, `w = û₀`, `v = û₁` the per-segment loss is
//!
//! ```text
//! ‖u₀ − Ĉz − D̂w‖² + ‖u₁ − D̂v‖²
//!   − 2u₁ᵀĈÂz − 2u₁ᵀĈB̂w + ‖ĈÂz‖² + 2(ĈÂz)ᵀD̂v
//!   + 2(ĈÂz)ᵀĈB̂w + ‖ĈB̂w‖² + 2(ĈB̂w)ᵀD̂v
//! ```
//!
//! The first two terms are convex quadratics in `δ` and stay exact. Each of
//! the seven others is bounded by `tr M` through a Schur block whose
//! products of deltas are split with Young's inequality
//! `He(UᵀV) ⪯ UᵀWU + VᵀW⁻¹V`; every `−W⁻¹` slot is then replaced by the
//! affine overbound `−2W̃⁻¹ + W̃⁻¹WW̃⁻¹`. All bounds are tight at `δ = 0`
//! with `W = W̃`.

use serde::{Deserialize, Serialize};

use crate::dissipativity::{check_corollary1, convexified_matrix, inverse_overbound, p_floor_block, QsrSupply, CERT_TOL};
use crate::error::{Error, Result};
use crate::experts::TrainingDataset;
use crate::lmi::{AffMat, LmiBlock, SdpProblem, VarMat, VarRegistry};
use crate::numlin::{sym_eig, Matrix};

use super::ControllerParams;

/// Internal shift for the strict inequalities of the surrogate.
pub const SURROGATE_MARGIN: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateMode {
    /// Seven blocks in total, built from data moments summed over segments.
    Aggregated,
    /// Seven blocks per segment with scalar bounds `m_{k,i}`.
    PerSegment,
}

/// Structure of the bound used for a term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermKind {
    /// Product of two deltas: one Young split.
    Bilinear,
    /// Squared norm of a bilinear expression: Schur complement, then a split.
    NestedSquare,
    /// Three deltas: an outer split whose slots hold a bilinear expression.
    Cubic,
    /// Four deltas: an outer split with two bilinear slots.
    Quartic,
}

/// The seven nonconvex terms, in expansion order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    /// `−2u₁ᵀĈÂz`
    U1Caz,
    /// `−2u₁ᵀĈB̂w`
    U1Cbw,
    /// `‖ĈÂz‖²`
    CazSquared,
    /// `2(ĈÂz)ᵀD̂v`
    CazDv,
    /// `2(ĈÂz)ᵀĈB̂w`
    CazCbw,
    /// `‖ĈB̂w‖²`
    CbwSquared,
    /// `2(ĈB̂w)ᵀD̂v`
    CbwDv,
}

impl Term {
    pub const ALL: [Term; 7] = [
        Term::U1Caz,
        Term::U1Cbw,
        Term::CazSquared,
        Term::CazDv,
        Term::CazCbw,
        Term::CbwSquared,
        Term::CbwDv,
    ];

    pub fn kind(self) -> TermKind {
        match self {
            Term::U1Caz | Term::U1Cbw => TermKind::Bilinear,
            Term::CazSquared | Term::CbwSquared => TermKind::NestedSquare,
            Term::CazDv | Term::CbwDv => TermKind::Cubic,
            Term::CazCbw => TermKind::Quartic,
        }
    }

    /// True value of the term for one segment.
    pub fn value(self, p: &ControllerParams, z: &[f64], w: &[f64], v: &[f64], u1: &[f64]) -> f64 {
        let dot = crate::numlin::dot;
        let caz = p.c.matvec(&p.a.matvec(z).unwrap()).unwrap();
        let cbw = p.c.matvec(&p.b.matvec(w).unwrap()).unwrap();
        let dv = p.d.matvec(v).unwrap();
        match self {
            Term::U1Caz => -2.0 * dot(u1, &caz),
            Term::U1Cbw => -2.0 * dot(u1, &cbw),
            Term::CazSquared => dot(&caz, &caz),
            Term::CazDv => 2.0 * dot(&caz, &dv),
            Term::CazCbw => 2.0 * dot(&caz, &cbw),
            Term::CbwSquared => dot(&cbw, &cbw),
            Term::CbwDv => 2.0 * dot(&cbw, &dv),
        }
    }
}

/// Decision variables of the controller step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeltaVars {
    pub a: VarMat,
    pub b: VarMat,
    pub c: VarMat,
    pub d: VarMat,
}

impl DeltaVars {
    pub fn read(&self, x: &[f64]) -> ControllerParams {
        ControllerParams {
            a: self.a.read(x),
            b: self.b.read(x),
            c: self.c.read(x),
            d: self.d.read(x),
        }
    }

    pub fn write(&self, x: &mut [f64], d: &ControllerParams) {
        self.a.write(x, &d.a);
        self.b.write(x, &d.b);
        self.c.write(x, &d.c);
        self.d.write(x, &d.d);
    }
}

/// One overbound block of the surrogate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermRecord {
    /// Segment index in per-segment mode.
    pub segment: Option<usize>,
    pub term: Term,
    pub kind: TermKind,
    pub block: usize,
    pub m: VarMat,
    pub w: Vec<VarMat>,
    /// Smallest admissible `M` at `δ = 0`; its trace is the term's value.
    pub m_at_zero: Matrix,
}

/// Variable layout and audit trail of a surrogate problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bookkeeping {
    pub delta: DeltaVars,
    pub p: Option<VarMat>,
    pub terms: Vec<TermRecord>,
    pub dissipativity_block: Option<usize>,
    pub p_floor_block: Option<usize>,
    /// Objective constant: surrogate value = problem objective + this.
    pub constant: f64,
    pub n_vars: usize,
}

impl Bookkeeping {
    pub fn surrogate_value(&self, prob: &SdpProblem, x: &[f64]) -> f64 {
        prob.objective_value(x) + self.constant
    }

    /// Weight variables in emission order, for the next linearization.
    pub fn read_weights(&self, x: &[f64]) -> Vec<Matrix> {
        self.terms.iter().flat_map(|t| t.w.iter().map(|w| w.read(x))).collect()
    }

    /// The point `δ = 0`, `P = P̃`, `M = M₀`, `W = W̃`.
    pub fn zero_point(&self, p_tilde: Option<&Matrix>, w_tilde: &[Matrix]) -> Vec<f64> {
        let mut x = vec![0.0; self.n_vars];
        if let (Some(pv), Some(pt)) = (self.p, p_tilde) {
            pv.write(&mut x, pt);
        }
        let mut k = 0;
        for t in &self.terms {
            t.m.write(&mut x, &t.m_at_zero);
            for w in &t.w {
                w.write(&mut x, &w_tilde[k]);
                k += 1;
            }
        }
        x
    }

    /// [`Self::zero_point`] with every bound raised by `eps·(1 + ‖M₀‖)`,
    /// which makes all overbound blocks strictly feasible.
    pub fn interior_point(&self, p_tilde: Option<&Matrix>, w_tilde: &[Matrix], eps: f64) -> Vec<f64> {
        let mut x = self.zero_point(p_tilde, w_tilde);
        for t in &self.terms {
            let r = t.m.rows;
            let m = &t.m_at_zero + &Matrix::identity(r).scale(eps * (1.0 + t.m_at_zero.max_abs()));
            t.m.write(&mut x, &m);
        }
        x
    }

    pub fn n_weights(&self) -> usize {
        self.terms.iter().map(|t| t.w.len()).sum()
    }
}

/// Inputs to a surrogate build beyond the controller and the data.
#[derive(Clone, Debug)]
pub struct SurrogateSpec<'a> {
    pub mode: SurrogateMode,
    /// Dissipativity constraint on the updated controller; absent for the
    /// unconstrained variant.
    pub qsr: Option<&'a QsrSupply>,
    pub p_tilde: Option<&'a Matrix>,
    pub w_tilde: Option<&'a [Matrix]>,
    pub p_floor: f64,
}

/// `val₀ + lin(δ) + dĈ · right(δ)`, an `m×r` expression.
struct Factor {
    val0: Matrix,
    lin: AffMat,
    bil: Option<(AffMat, AffMat)>,
}

fn aff_is_zero(m: &AffMat) -> bool {
    (0..m.rows()).all(|i| (0..m.cols()).all(|j| m.get(i, j).is_zero()))
}

impl Factor {
    fn is_const(&self) -> bool {
        self.bil.is_none() && aff_is_zero(&self.lin)
    }

    fn aff(&self) -> Result<AffMat> {
        self.lin.add_constant(&self.val0)
    }
}

struct Ctx {
    theta: ControllerParams,
    da: AffMat,
    db: AffMat,
    dc: AffMat,
    dd: AffMat,
}

#[derive(Clone, Copy)]
enum Inner {
    A,
    B,
}

impl Ctx {
    /// `Ĉ F̂ R` with `F̂ ∈ {Â, B̂}`.
    fn product(&self, f: Inner, right: &Matrix) -> Result<Factor> {
        let (f0, df) = match f {
            Inner::A => (&self.theta.a, &self.da),
            Inner::B => (&self.theta.b, &self.db),
        };
        let fr = f0 * right;
        let val0 = &self.theta.c * &fr;
        let lin = self.dc.right_mul(&fr)?.add(&df.left_mul(&self.theta.c)?.right_mul(right)?)?;
        Ok(Factor {
            val0,
            lin,
            bil: Some((self.dc.clone(), df.right_mul(right)?)),
        })
    }

    /// `D̂ R`.
    fn feedthrough(&self, right: &Matrix) -> Result<Factor> {
        Ok(Factor {
            val0: &self.theta.d * right,
            lin: self.dd.right_mul(right)?,
            bil: None,
        })
    }
}

fn constant_factor(m: Matrix) -> Factor {
    let lin = AffMat::zeros(m.rows(), m.cols());
    Factor { val0: m, lin, bil: None }
}

/// A split `He(UᵀV)` with `ut = Uᵀ` (dim×k) and `v = V` (k×dim).
struct Piece {
    ut: AffMat,
    v: AffMat,
}

struct WeightSource<'a> {
    tilde: Option<&'a [Matrix]>,
    used: usize,
}

impl WeightSource<'_> {
    fn next(&mut self, n: usize) -> Result<Matrix> {
        let w = match self.tilde {
            Some(ws) => ws
                .get(self.used)
                .cloned()
                .ok_or_else(|| Error::Precondition("too few weight linearization points".into()))?,
            None => Matrix::identity(n),
        };
        if w.shape() != (n, n) {
            return Err(Error::Precondition("weight linearization point has the wrong size".into()));
        }
        self.used += 1;
        Ok(w)
    }
}

struct Built {
    block: AffMat,
    m: VarMat,
    w: Vec<VarMat>,
    m_at_zero: Matrix,
}

/// `[[base, U₁ᵀ, V₁ᵀ, …], [U₁, −2G₁ + G₁W₁G₁, 0, …], [V₁, 0, −W₁, …], …]`.
fn young_close(
    base: AffMat,
    pieces: Vec<Piece>,
    reg: &mut VarRegistry,
    ws: &mut WeightSource,
    wvars: &mut Vec<VarMat>,
) -> Result<AffMat> {
    let k = 1 + 2 * pieces.len();
    let mut grid: Vec<Vec<Option<AffMat>>> = vec![vec![None; k]; k];
    grid[0][0] = Some(base);
    for (j, pc) in pieces.into_iter().enumerate() {
        let n = pc.v.rows();
        let w = reg.symmetric(n);
        let wt = ws.next(n)?;
        let (iu, iv) = (1 + 2 * j, 2 + 2 * j);
        grid[iu][iu] = Some(inverse_overbound(&w.aff(), &wt)?);
        grid[iv][iv] = Some(w.aff().scale(-1.0));
        grid[0][iu] = Some(pc.ut);
        grid[0][iv] = Some(pc.v.transpose());
        wvars.push(w);
    }
    AffMat::sym_from_upper(&grid)
}

fn he(m: &AffMat) -> Result<AffMat> {
    m.he()
}

/// `tr He(F₂ᵀF₁) ≤ tr M`.
fn product_term(f1: Factor, f2: Factor, reg: &mut VarRegistry, ws: &mut WeightSource) -> Result<Built> {
    let (mr, r) = f1.val0.shape();
    let mv = reg.symmetric(r);
    let g0 = &f2.val0.transpose() * &f1.val0;
    let m_at_zero = &g0 + &g0.transpose();
    let gamma = he(&f1.lin.left_mul(&f2.val0.transpose())?)?
        .add(&he(&f2.lin.left_mul(&f1.val0.transpose())?)?)?
        .add_constant(&m_at_zero)?;
    let core = gamma.sub(&mv.aff())?;
    let mut wvars = Vec::new();
    let outer = !f1.is_const() && !f2.is_const();
    let block = if outer {
        let w1 = reg.symmetric(mr);
        let w1t = ws.next(mr)?;
        wvars.push(w1);
        let base = AffMat::sym_from_upper(&[
            vec![Some(core), Some(f2.lin.transpose()), Some(f1.lin.transpose())],
            vec![None, Some(inverse_overbound(&w1.aff(), &w1t)?), Some(AffMat::zeros(mr, mr))],
            vec![None, None, Some(w1.aff().scale(-1.0))],
        ])?;
        let dim = r + 2 * mr;
        let sel = Matrix::from_fn(r, dim, |i, j| if i == j { 1.0 } else { 0.0 });
        let mut pieces = Vec::new();
        // bilinear part of F₁ enters the (1,1) block through F₂₀ᵀ and the Y slot
        if let Some((dc, right)) = &f1.bil {
            let k = Matrix::vstack(&[&f2.val0.transpose(), &Matrix::zeros(mr, mr), &Matrix::identity(mr)])?;
            pieces.push(Piece {
                ut: dc.left_mul(&k)?,
                v: right.right_mul(&sel)?,
            });
        }
        if let Some((dc, right)) = &f2.bil {
            let k = Matrix::vstack(&[&f1.val0.transpose(), &Matrix::identity(mr), &Matrix::zeros(mr, mr)])?;
            pieces.push(Piece {
                ut: dc.left_mul(&k)?,
                v: right.right_mul(&sel)?,
            });
        }
        young_close(base, pieces, reg, ws, &mut wvars)?
    } else {
        let mut pieces = Vec::new();
        if let Some((dc, right)) = &f1.bil {
            pieces.push(Piece {
                ut: dc.left_mul(&f2.val0.transpose())?,
                v: right.clone(),
            });
        }
        if let Some((dc, right)) = &f2.bil {
            pieces.push(Piece {
                ut: dc.left_mul(&f1.val0.transpose())?,
                v: right.clone(),
            });
        }
        young_close(core, pieces, reg, ws, &mut wvars)?
    };
    Ok(Built {
        block,
        m: mv,
        w: wvars,
        m_at_zero,
    })
}

/// `‖F‖²_F ≤ tr M` via `[[−M, Fᵀ], [F, −I]] ⪯ 0`.
fn square_term(f: Factor, reg: &mut VarRegistry, ws: &mut WeightSource) -> Result<Built> {
    let (mr, r) = f.val0.shape();
    let mv = reg.symmetric(r);
    let m_at_zero = &f.val0.transpose() * &f.val0;
    let fa = f.aff()?;
    let base = AffMat::sym_from_upper(&[
        vec![Some(mv.aff().scale(-1.0)), Some(fa.transpose())],
        vec![None, Some(AffMat::identity(mr).scale(-1.0))],
    ])?;
    let mut pieces = Vec::new();
    if let Some((dc, right)) = &f.bil {
        let k = Matrix::vstack(&[&Matrix::zeros(r, mr), &Matrix::identity(mr)])?;
        let sel = Matrix::from_fn(r, r + mr, |i, j| if i == j { 1.0 } else { 0.0 });
        pieces.push(Piece {
            ut: dc.left_mul(&k)?,
            v: right.right_mul(&sel)?,
        });
    }
    let mut wvars = Vec::new();
    let block = young_close(base, pieces, reg, ws, &mut wvars)?;
    Ok(Built {
        block,
        m: mv,
        w: wvars,
        m_at_zero,
    })
}

/// Factors `Z = A Bᵀ` of a cross moment, dropping null directions (rank ≥ 1).
fn factor_cross(z: &Matrix) -> Result<(Matrix, Matrix)> {
    let q = z.cols();
    let eig = sym_eig(&z.tr_matmul(z)?)?;
    let top = eig.max().max(0.0);
    let keep: Vec<usize> = (0..q).filter(|&i| eig.eigenvalues[i] > 1e-14 * top && top > 0.0).collect();
    if keep.is_empty() {
        let mut b = Matrix::zeros(q, 1);
        b.set(0, 0, 1.0);
        return Ok((Matrix::zeros(z.rows(), 1), b));
    }
    let v = Matrix::from_fn(q, keep.len(), |i, k| eig.eigenvectors.get(i, keep[k]));
    Ok((z * &v, v))
}

/// `S = L Lᵀ` for a PSD moment, dropping null directions (rank ≥ 1).
fn factor_gram(s: &Matrix) -> Result<Matrix> {
    let n = s.rows();
    let eig = sym_eig(s)?;
    let top = eig.max().max(0.0);
    let keep: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] > 1e-14 * top && top > 0.0).collect();
    if keep.is_empty() {
        return Ok(Matrix::zeros(n, 1));
    }
    Ok(Matrix::from_fn(n, keep.len(), |i, k| {
        eig.eigenvectors.get(i, keep[k]) * eig.eigenvalues[keep[k]].sqrt()
    }))
}

/// Data entering the seven bounds, already weighted by `1/K`.
struct Moments {
    a1: Matrix,
    b1: Matrix,
    a2: Matrix,
    b2: Matrix,
    lz: Matrix,
    lw: Matrix,
    a4: Matrix,
    b4: Matrix,
    a5: Matrix,
    b5: Matrix,
    a7: Matrix,
    b7: Matrix,
}

fn outer_sum(data: &TrainingDataset, f: impl Fn(&crate::experts::Segment) -> (Vec<f64>, Vec<f64>)) -> Matrix {
    let (x, y) = f(&data.segments[0]);
    let mut m = Matrix::zeros(x.len(), y.len());
    let w = 1.0 / data.len() as f64;
    for s in &data.segments {
        let (x, y) = f(s);
        for i in 0..x.len() {
            for j in 0..y.len() {
                m.data_mut()[i * y.len() + j] += w * x[i] * y[j];
            }
        }
    }
    m
}

fn aggregated_moments(data: &TrainingDataset) -> Result<Moments> {
    let z = |s: &crate::experts::Segment| s.x_hat0.clone();
    let w = |s: &crate::experts::Segment| s.u_hat[0].clone();
    let v = |s: &crate::experts::Segment| s.u_hat[1].clone();
    let u1 = |s: &crate::experts::Segment| s.u[1].clone();
    let (a1, b1) = factor_cross(&outer_sum(data, |s| (z(s), u1(s))))?;
    let (a2, b2) = factor_cross(&outer_sum(data, |s| (w(s), u1(s))))?;
    let lz = factor_gram(&outer_sum(data, |s| (z(s), z(s))).symmetrize()?)?;
    let lw = factor_gram(&outer_sum(data, |s| (w(s), w(s))).symmetrize()?)?;
    let (a4, b4) = factor_cross(&outer_sum(data, |s| (z(s), v(s))))?;
    let (a5, b5) = factor_cross(&outer_sum(data, |s| (z(s), w(s))))?;
    let (a7, b7) = factor_cross(&outer_sum(data, |s| (w(s), v(s))))?;
    Ok(Moments {
        a1,
        b1,
        a2,
        b2,
        lz,
        lw,
        a4,
        b4,
        a5,
        b5,
        a7,
        b7,
    })
}

fn segment_moments(s: &crate::experts::Segment, weight: f64) -> Moments {
    let col = |v: &[f64], k: f64| Matrix::from_fn(v.len(), 1, |i, _| k * v[i]);
    let (z, w, v, u1) = (&s.x_hat0, &s.u_hat[0], &s.u_hat[1], &s.u[1]);
    let sq = weight.sqrt();
    Moments {
        a1: col(z, weight),
        b1: col(u1, 1.0),
        a2: col(w, weight),
        b2: col(u1, 1.0),
        lz: col(z, sq),
        lw: col(w, sq),
        a4: col(z, weight),
        b4: col(v, 1.0),
        a5: col(z, weight),
        b5: col(w, 1.0),
        a7: col(w, weight),
        b7: col(v, 1.0),
    }
}

fn build_term(term: Term, ctx: &Ctx, mo: &Moments, reg: &mut VarRegistry, ws: &mut WeightSource) -> Result<Built> {
    match term {
        Term::U1Caz => product_term(ctx.product(Inner::A, &mo.a1)?, constant_factor(mo.b1.scale(-1.0)), reg, ws),
        Term::U1Cbw => product_term(ctx.product(Inner::B, &mo.a2)?, constant_factor(mo.b2.scale(-1.0)), reg, ws),
        Term::CazSquared => square_term(ctx.product(Inner::A, &mo.lz)?, reg, ws),
        Term::CazDv => product_term(ctx.product(Inner::A, &mo.a4)?, ctx.feedthrough(&mo.b4)?, reg, ws),
        Term::CazCbw => product_term(ctx.product(Inner::A, &mo.a5)?, ctx.product(Inner::B, &mo.b5)?, reg, ws),
        Term::CbwSquared => square_term(ctx.product(Inner::B, &mo.lw)?, reg, ws),
        Term::CbwDv => product_term(ctx.product(Inner::B, &mo.a7)?, ctx.feedthrough(&mo.b7)?, reg, ws),
    }
}

/// Dense accumulator for `½xᵀHx + cᵀx + k`.
struct Quadratic {
    h: Matrix,
    c: Vec<f64>,
    k: f64,
}

impl Quadratic {
    fn new(n: usize) -> Self {
        Quadratic {
            h: Matrix::zeros(n, n),
            c: vec![0.0; n],
            k: 0.0,
        }
    }

    /// Adds `‖E‖²_F` for an affine matrix `E`.
    fn add_squares(&mut self, e: &AffMat) {
        let n = self.c.len();
        for i in 0..e.rows() {
            for j in 0..e.cols() {
                let mut ex = e.get(i, j).clone();
                ex.compact();
                let e0 = ex.constant;
                self.k += e0 * e0;
                for &(v, a) in &ex.terms {
                    self.c[v] += 2.0 * e0 * a;
                    for &(w, b) in &ex.terms {
                        self.h.data_mut()[v * n + w] += 2.0 * a * b;
                    }
                }
            }
        }
    }
}

fn stacked_gram(data: &TrainingDataset, f: impl Fn(&crate::experts::Segment) -> Vec<f64>) -> Result<Matrix> {
    factor_gram(&outer_sum(data, |s| (f(s), f(s))).symmetrize()?)
}

/// Builds the surrogate problem around `params0`.
///
/// Variables: `δÂ, δB̂, δĈ, δD̂`, then `P` when constrained, then the bound
/// and weight matrices of every overbound block.
pub fn expand_and_overbound(
    params0: &ControllerParams,
    data: &TrainingDataset,
    spec: &SurrogateSpec,
) -> Result<(SdpProblem, Bookkeeping)> {
    if data.is_empty() {
        return Err(Error::Precondition("surrogate needs at least one segment".into()));
    }
    data.validate()?;
    super::check_controller(params0, data)?;
    let (n, p, m) = (params0.n_states(), params0.n_inputs(), params0.n_outputs());
    let p_tilde = match (spec.qsr, spec.p_tilde) {
        (Some(q), pt) => {
            let pt = pt.cloned().unwrap_or_else(|| Matrix::identity(n));
            let res = check_corollary1(params0, q, &pt)?;
            if res > CERT_TOL {
                return Err(Error::Precondition(format!(
                    "starting controller violates the dissipativity constraint (residual {res:.3e})"
                )));
            }
            Some(pt)
        }
        (None, _) => None,
    };

    let mut reg = VarRegistry::new();
    let delta = DeltaVars {
        a: reg.full(n, n),
        b: reg.full(n, p),
        c: reg.full(m, n),
        d: reg.full(m, p),
    };
    let pv = spec.qsr.map(|_| reg.symmetric(n));
    let ctx = Ctx {
        theta: params0.clone(),
        da: delta.a.aff(),
        db: delta.b.aff(),
        dc: delta.c.aff(),
        dd: delta.d.aff(),
    };

    let mut blocks: Vec<LmiBlock> = Vec::new();
    let mut terms = Vec::new();
    let mut ws = WeightSource {
        tilde: spec.w_tilde,
        used: 0,
    };
    let sets: Vec<(Option<usize>, Moments)> = match spec.mode {
        SurrogateMode::Aggregated => vec![(None, aggregated_moments(data)?)],
        SurrogateMode::PerSegment => {
            let w = 1.0 / data.len() as f64;
            data.segments
                .iter()
                .enumerate()
                .map(|(k, s)| (Some(k), segment_moments(s, w)))
                .collect()
        }
    };
    for (seg, mo) in &sets {
        for term in Term::ALL {
            let built = build_term(term, &ctx, mo, &mut reg, &mut ws)?;
            terms.push(TermRecord {
                segment: *seg,
                term,
                kind: term.kind(),
                block: blocks.len(),
                m: built.m,
                w: built.w,
                m_at_zero: built.m_at_zero,
            });
            blocks.push(built.block.to_block()?.with_label(format!("{term:?}")));
        }
    }

    let mut dissipativity_block = None;
    let mut p_floor_idx = None;
    if let (Some(qsr), Some(pv), Some(pt)) = (spec.qsr, pv, &p_tilde) {
        let a = ctx.da.add_constant(&params0.a)?;
        let b = ctx.db.add_constant(&params0.b)?;
        let c = ctx.dc.add_constant(&params0.c)?;
        let d = ctx.dd.add_constant(&params0.d)?;
        let cons = convexified_matrix(&a, &b, &c, &d, &pv.aff(), qsr, pt)?;
        dissipativity_block = Some(blocks.len());
        blocks.push(cons.to_block()?.with_label("dissipativity"));
        p_floor_idx = Some(blocks.len());
        blocks.push(p_floor_block(&pv, spec.p_floor)?);
    }

    let nv = reg.n_vars();
    let mut quad = Quadratic::new(nv);
    // exact parts: ‖u₀ − Ĉz − D̂w‖² and ‖u₁ − D̂v‖², both averaged
    let chat = ctx.dc.add_constant(&params0.c)?;
    let dhat = ctx.dd.add_constant(&params0.d)?;
    let l0 = stacked_gram(data, |s| [s.x_hat0.clone(), s.u_hat[0].clone(), s.u[0].clone()].concat())?;
    let g0 = AffMat::from_blocks(&[vec![
        Some(chat.scale(-1.0)),
        Some(dhat.scale(-1.0)),
        Some(AffMat::identity(m)),
    ]])?;
    quad.add_squares(&g0.right_mul(&l0)?);
    let l1 = stacked_gram(data, |s| [s.u_hat[1].clone(), s.u[1].clone()].concat())?;
    let g1 = AffMat::from_blocks(&[vec![Some(dhat.scale(-1.0)), Some(AffMat::identity(m))]])?;
    quad.add_squares(&g1.right_mul(&l1)?);

    let mut objective = quad.c;
    for t in &terms {
        for i in 0..t.m.rows {
            objective[t.m.index(i, i)] += 1.0;
        }
    }
    let prob = SdpProblem {
        n_vars: nv,
        objective,
        quadratic: Some(quad.h),
        blocks,
        margin: SURROGATE_MARGIN,
    };
    let book = Bookkeeping {
        delta,
        p: pv,
        terms,
        dissipativity_block,
        p_floor_block: p_floor_idx,
        constant: quad.k,
        n_vars: nv,
    };
    Ok((prob, book))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::random_controller;
    use crate::training::tests::random_dataset;
    use crate::training::two_step_loss;
    use rand::{Rng, SeedableRng};

    fn spec(mode: SurrogateMode) -> SurrogateSpec<'static> {
        SurrogateSpec {
            mode,
            qsr: None,
            p_tilde: None,
            w_tilde: None,
            p_floor: 1e-6,
        }
    }

    #[test]
    fn expansion_identity() {
        let data = random_dataset(3, 2, 2, 2, 1);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let c = random_controller(2, 2, 2, &mut rng);
        for s in &data.segments {
            let y = crate::training::forward_propagate(&c, &s.x_hat0, &s.u_hat).unwrap();
            let e1: f64 = y[1].iter().zip(&s.u[1]).map(|(a, b)| (a - b) * (b - a)).sum::<f64>();
            let dv = c.d.matvec(&s.u_hat[1]).unwrap();
            let exact: f64 = s.u[1].iter().zip(&dv).map(|(a, b)| (a - b) * (a - b)).sum();
            let terms: f64 = Term::ALL
                .iter()
                .map(|t| t.value(&c, &s.x_hat0, &s.u_hat[0], &s.u_hat[1], &s.u[1]))
                .sum();
            assert!((exact + terms + e1).abs() < 1e-10);
        }
    }

    #[test]
    fn block_count_and_tightness() {
        let data = random_dataset(4, 2, 1, 1, 3);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let c = random_controller(2, 1, 1, &mut rng);
        let truth = two_step_loss(&c, &data).unwrap();
        for mode in [SurrogateMode::PerSegment, SurrogateMode::Aggregated] {
            let (prob, book) = expand_and_overbound(&c, &data, &spec(mode)).unwrap();
            let want = if mode == SurrogateMode::PerSegment { 28 } else { 7 };
            assert_eq!(book.terms.len(), want);
            assert_eq!(prob.blocks.len(), want);
            let ws: Vec<Matrix> = (0..book.n_weights()).map(|i| {
                let n = book.terms.iter().flat_map(|t| t.w.iter()).nth(i).unwrap().rows;
                Matrix::identity(n)
            }).collect();
            let x = book.zero_point(None, &ws);
            for b in &prob.blocks {
                assert!(b.max_eig_at(&x).unwrap() < 1e-9);
            }
            let s = book.surrogate_value(&prob, &x);
            assert!((s - truth).abs() < 1e-9 * (1.0 + truth), "{s} vs {truth}");
            if mode == SurrogateMode::PerSegment {
                for t in &book.terms {
                    assert_eq!(t.m.rows, 1);
                    let seg = &data.segments[t.segment.unwrap()];
                    let v = t.term.value(&c, &seg.x_hat0, &seg.u_hat[0], &seg.u_hat[1], &seg.u[1]) / 4.0;
                    assert!((t.m_at_zero.get(0, 0) - v).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn soundness_on_random_feasible_points() {
        let data = random_dataset(2, 2, 2, 2, 7);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let c = random_controller(2, 2, 2, &mut rng);
        let (prob, book) = expand_and_overbound(&c, &data, &spec(SurrogateMode::PerSegment)).unwrap();
        let nw = book.n_weights();
        let ws: Vec<Matrix> = book
            .terms
            .iter()
            .flat_map(|t| t.w.iter().map(|w| Matrix::identity(w.rows)))
            .collect();
        assert_eq!(ws.len(), nw);
        let mut checked = 0;
        for _ in 0..200 {
            let mut x = book.zero_point(None, &ws);
            let scale = 0.3;
            let delta = random_controller(2, 2, 2, &mut rng);
            let d = crate::training::axpy_params(&ControllerParams::zero(2, 2, 2), &delta, scale);
            book.delta.write(&mut x, &d);
            let theta = crate::training::axpy_params(&c, &d, 1.0);
            for t in &book.terms {
                // push M up until the block holds
                let blk = &prob.blocks[t.block];
                let mut bump = 0.0;
                loop {
                    let m = &t.m_at_zero + &Matrix::identity(t.m.rows).scale(bump);
                    t.m.write(&mut x, &m);
                    if blk.max_eig_at(&x).unwrap() <= 0.0 {
                        break;
                    }
                    bump = if bump == 0.0 { 1e-3 } else { bump * 2.0 };
                    if bump > 1e6 {
                        break;
                    }
                }
                if blk.max_eig_at(&x).unwrap() > 0.0 {
                    continue;
                }
                let seg = &data.segments[t.segment.unwrap()];
                let truth =
                    t.term.value(&theta, &seg.x_hat0, &seg.u_hat[0], &seg.u_hat[1], &seg.u[1]) / 2.0;
                let bound = t.m.read(&x).trace();
                assert!(truth <= bound + 1e-6, "{:?}: {truth} > {bound}", t.term);
                checked += 1;
            }
            let _ = rng.gen::<f64>();
        }
        assert!(checked > 1000);
    }
}
